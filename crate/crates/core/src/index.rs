//! Dense vector index over item embeddings: exact inner-product top-k, an
//! approximate layered proximity graph, serialization, and recall
//! diagnostics.
//!
//! The approximate index orders neighbors by inner product through a norm
//! augmentation: every stored vector gets one extra implicit coordinate
//! `sqrt(max_norm^2 - |x|^2)` so that graph construction runs in a space
//! where inner-product ranking coincides with Euclidean ranking. Queries
//! augment with zero, which leaves their scores as plain inner products.

use alloc::collections::BinaryHeap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use core::cmp::Reverse;
use core::fmt;

use crate::apn::item_adapter;
use crate::corpus::ItemCollection;
use crate::encoder::{compose_item_input, encode, Vocabulary};
use crate::math;
use crate::matrix::Matrix;
use crate::model::ModelParams;
use crate::rng::Rng;

pub const DEFAULT_MAX_DEGREE: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 100;
pub const DEFAULT_EF_SEARCH: usize = 64;

/// Matrix of item vectors with the producing checkpoint's provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    vectors: Matrix,
    item_ids: Vec<String>,
    tag: String,
}

impl DenseIndex {
    pub fn new(vectors: Matrix, item_ids: Vec<String>, tag: String) -> Result<Self, IndexError> {
        if vectors.rows() != item_ids.len() {
            return Err(IndexError::IdCountMismatch {
                vectors: vectors.rows(),
                ids: item_ids.len(),
            });
        }
        if tag.is_empty() {
            return Err(IndexError::EmptyTag);
        }
        if !vectors.is_finite() {
            return Err(IndexError::NonFiniteVector);
        }
        Ok(DenseIndex {
            vectors,
            item_ids,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn vector(&self, ordinal: usize) -> &[f64] {
        self.vectors.row(ordinal)
    }

    pub fn item_id(&self, ordinal: usize) -> &str {
        &self.item_ids[ordinal]
    }

    /// Exact top-k by descending inner product, ties broken by ascending
    /// ordinal.
    pub fn exact_topk(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>, IndexError> {
        assert!(k >= 1);
        if query.len() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                found: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, math::dot(query, self.vector(i))))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Encodes every item with the item encoder; when the model carries a
/// personalization network the adapter is applied so retrieval scores match
/// the personalized scoring path exactly.
pub fn build_dense_index(
    model: &ModelParams,
    vocab: &Vocabulary,
    items: &ItemCollection,
    tag: String,
) -> Result<DenseIndex, IndexError> {
    if items.is_empty() {
        return Err(IndexError::EmptyCollection);
    }
    let mut vectors = Matrix::zeros(items.len(), model.config.dim);
    let mut ids = Vec::with_capacity(items.len());
    for (ord, item) in items.iter().enumerate() {
        let input = compose_item_input(&item.text, vocab, model.config.max_seq_len)
            .map_err(|e| IndexError::Encode {
                item_id: item.item_id.clone(),
                reason: alloc::format!("{e}"),
            })?;
        let mut v = encode(&model.item_encoder, &input);
        if let Some(apn) = &model.apn {
            v = item_adapter(apn, &v);
        }
        vectors.row_mut(ord).copy_from_slice(&v);
        ids.push(item.item_id.clone());
    }
    DenseIndex::new(vectors, ids, tag)
}

/// Build parameters for the approximate graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApproxParams {
    pub max_degree: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for ApproxParams {
    fn default() -> Self {
        ApproxParams {
            max_degree: DEFAULT_MAX_DEGREE,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            seed: 0x5ca1ab1e,
        }
    }
}

/// Layered proximity graph over the vectors of one [`DenseIndex`].
#[derive(Debug, Clone)]
pub struct ApproxIndex {
    params: ApproxParams,
    /// `neighbors[level][node]` adjacency lists; level 0 covers every node.
    neighbors: Vec<Vec<Vec<u32>>>,
    node_level: Vec<usize>,
    entry_point: u32,
    max_level: usize,
    /// Implicit augmentation coordinate per node.
    aug: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl ApproxIndex {
    pub fn build(dense: &DenseIndex, params: ApproxParams) -> Result<Self, IndexError> {
        if dense.is_empty() {
            return Err(IndexError::EmptyCollection);
        }
        assert!(params.max_degree >= 2);
        let n = dense.len();

        // augmentation coordinate: sqrt(max|x|^2 - |x|^2)
        let norms_sq: Vec<f64> = (0..n)
            .map(|i| math::dot(dense.vector(i), dense.vector(i)))
            .collect();
        let max_sq = norms_sq.iter().copied().fold(0.0, f64::max);
        let aug: Vec<f64> = norms_sq
            .iter()
            .map(|&s| math::sqrt((max_sq - s).max(0.0)))
            .collect();

        let mut rng = Rng::new(params.seed);
        let level_scale = 1.0 / math::ln(params.max_degree as f64);
        let node_level: Vec<usize> = (0..n)
            .map(|_| {
                let u = rng.next_f64().max(1e-12);
                (-math::ln(u) * level_scale) as usize
            })
            .collect();
        let top = node_level.iter().copied().max().unwrap_or(0);

        let mut index = ApproxIndex {
            params,
            neighbors: (0..=top).map(|_| vec![Vec::new(); n]).collect(),
            node_level: node_level.clone(),
            entry_point: 0,
            max_level: node_level[0],
            aug,
        };

        for node in 1..n {
            index.insert(dense, node as u32);
        }
        Ok(index)
    }

    fn stored_sim(&self, dense: &DenseIndex, a: u32, b: u32) -> f64 {
        math::dot(dense.vector(a as usize), dense.vector(b as usize))
            + self.aug[a as usize] * self.aug[b as usize]
    }

    fn degree_cap(&self, level: usize) -> usize {
        if level == 0 {
            self.params.max_degree * 2
        } else {
            self.params.max_degree
        }
    }

    fn insert(&mut self, dense: &DenseIndex, node: u32) {
        let node_level = self.node_level[node as usize];
        let mut ep = self.entry_point;

        // greedy descent through levels above the node's level
        let mut level = self.max_level;
        while level > node_level {
            ep = self.greedy_step(dense, node, ep, level);
            level -= 1;
        }

        // attach at each level from min(node_level, max_level) down to 0
        let mut eps = vec![ep];
        let start = node_level.min(self.max_level);
        for lvl in (0..=start).rev() {
            let candidates =
                self.search_layer_stored(dense, node, &eps, self.params.ef_construction, lvl);
            let selected = self.select_neighbors(dense, node, &candidates, self.params.max_degree);
            for &nb in &selected {
                self.neighbors[lvl][node as usize].push(nb);
                self.neighbors[lvl][nb as usize].push(node);
                let cap = self.degree_cap(lvl);
                if self.neighbors[lvl][nb as usize].len() > cap {
                    let kept = {
                        let current: Vec<(u32, f64)> = self.neighbors[lvl][nb as usize]
                            .iter()
                            .map(|&x| (x, self.stored_sim(dense, nb, x)))
                            .collect();
                        self.select_neighbors(dense, nb, &current, cap)
                    };
                    self.neighbors[lvl][nb as usize] = kept;
                }
            }
            eps = candidates.iter().map(|&(id, _)| id).collect();
            if eps.is_empty() {
                eps = vec![ep];
            }
        }

        if node_level > self.max_level {
            self.max_level = node_level;
            self.entry_point = node;
        }
    }

    fn greedy_step(&self, dense: &DenseIndex, node: u32, mut current: u32, level: usize) -> u32 {
        let mut best = self.stored_sim(dense, node, current);
        loop {
            let mut improved = false;
            for &nb in &self.neighbors[level][current as usize] {
                let sim = self.stored_sim(dense, node, nb);
                if sim > best || (sim == best && nb < current) {
                    best = sim;
                    current = nb;
                    improved = true;
                }
            }
            if !improved {
                return current;
            }
        }
    }

    /// Best-first expansion at one level; returns up to `ef` nodes sorted by
    /// descending similarity to `node` (stored-space similarity).
    fn search_layer_stored(
        &self,
        dense: &DenseIndex,
        node: u32,
        entry_points: &[u32],
        ef: usize,
        level: usize,
    ) -> Vec<(u32, f64)> {
        self.search_layer_inner(
            |cand| self.stored_sim(dense, node, cand),
            Some(node),
            entry_points,
            ef,
            level,
            dense.len(),
        )
    }

    fn search_layer_inner<F: Fn(u32) -> f64>(
        &self,
        sim_to_query: F,
        exclude: Option<u32>,
        entry_points: &[u32],
        ef: usize,
        level: usize,
        n: usize,
    ) -> Vec<(u32, f64)> {
        let mut visited = vec![false; n];
        // max-heap of candidates to expand, min-heap of current best ef
        let mut to_expand: BinaryHeap<(OrdF64, Reverse<u32>)> = BinaryHeap::new();
        let mut best: BinaryHeap<(Reverse<OrdF64>, u32)> = BinaryHeap::new();
        for &ep in entry_points {
            if visited[ep as usize] || Some(ep) == exclude {
                continue;
            }
            visited[ep as usize] = true;
            let sim = sim_to_query(ep);
            to_expand.push((OrdF64(sim), Reverse(ep)));
            best.push((Reverse(OrdF64(sim)), ep));
            if best.len() > ef {
                best.pop();
            }
        }
        if let Some(x) = exclude {
            visited[x as usize] = true;
        }
        while let Some((OrdF64(sim), Reverse(node))) = to_expand.pop() {
            let worst = best.peek().map(|(Reverse(OrdF64(s)), _)| *s);
            if best.len() >= ef && worst.map_or(false, |w| sim < w) {
                break;
            }
            for &nb in &self.neighbors[level][node as usize] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let nb_sim = sim_to_query(nb);
                let worst = best.peek().map(|(Reverse(OrdF64(s)), _)| *s);
                if best.len() < ef || worst.map_or(true, |w| nb_sim > w) {
                    to_expand.push((OrdF64(nb_sim), Reverse(nb)));
                    best.push((Reverse(OrdF64(nb_sim)), nb));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        let mut out: Vec<(u32, f64)> = best
            .into_iter()
            .map(|(Reverse(OrdF64(sim)), id)| (id, sim))
            .collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    /// Diversifying neighbor selection: a candidate is kept when it is
    /// closer to the base point than to any already-kept neighbor; leftover
    /// slots are filled with the nearest pruned candidates.
    fn select_neighbors(
        &self,
        dense: &DenseIndex,
        base: u32,
        candidates: &[(u32, f64)],
        m: usize,
    ) -> Vec<u32> {
        let mut sorted: Vec<(u32, f64)> = candidates
            .iter()
            .filter(|&&(id, _)| id != base)
            .copied()
            .collect();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        sorted.dedup_by_key(|(id, _)| *id);

        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut pruned: Vec<u32> = Vec::new();
        for &(cand, sim_to_base) in &sorted {
            if kept.len() >= m {
                break;
            }
            let dominated = kept
                .iter()
                .any(|&r| self.stored_sim(dense, cand, r) > sim_to_base);
            if dominated {
                pruned.push(cand);
            } else {
                kept.push(cand);
            }
        }
        for cand in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(cand);
        }
        kept
    }

    /// Approximate top-k by inner product; results sorted like
    /// [`DenseIndex::exact_topk`], duplicate-free.
    pub fn topk(
        &self,
        dense: &DenseIndex,
        query: &[f64],
        k: usize,
        ef_search: usize,
    ) -> Result<Vec<(usize, f64)>, IndexError> {
        assert!(k >= 1);
        if ef_search < k {
            return Err(IndexError::EfTooSmall { ef: ef_search, k });
        }
        if query.len() != dense.dim() {
            return Err(IndexError::DimMismatch {
                expected: dense.dim(),
                found: query.len(),
            });
        }
        let sim = |node: u32| math::dot(query, dense.vector(node as usize));
        let mut ep = self.entry_point;
        for level in (1..=self.max_level).rev() {
            // greedy walk toward the query at upper levels
            loop {
                let mut improved = false;
                let mut best = sim(ep);
                for &nb in &self.neighbors[level][ep as usize] {
                    let s = sim(nb);
                    if s > best || (s == best && nb < ep) {
                        best = s;
                        ep = nb;
                        improved = true;
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        let mut hits =
            self.search_layer_inner(sim, None, &[ep], ef_search, 0, dense.len());
        hits.truncate(k);
        Ok(hits.into_iter().map(|(id, s)| (id as usize, s)).collect())
    }

    /// True when every node is reachable from the entry point at level 0.
    pub fn is_fully_reachable(&self) -> bool {
        let n = self.neighbors[0].len();
        let mut seen = vec![false; n];
        let mut stack = vec![self.entry_point as usize];
        seen[self.entry_point as usize] = true;
        let mut count = 1;
        while let Some(node) = stack.pop() {
            for &nb in &self.neighbors[0][node] {
                if !seen[nb as usize] {
                    seen[nb as usize] = true;
                    count += 1;
                    stack.push(nb as usize);
                }
            }
        }
        count == n
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }
}

/// Mean recall@k of the approximate index against exact search.
pub fn recall_vs_exact(
    approx: &ApproxIndex,
    dense: &DenseIndex,
    queries: &[Vec<f64>],
    k: usize,
    ef_search: usize,
) -> Result<f64, IndexError> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in queries {
        let exact = dense.exact_topk(q, k)?;
        let approx_hits = approx.topk(dense, q, k, ef_search)?;
        let mut overlap = 0usize;
        for (id, _) in &approx_hits {
            if exact.iter().any(|(e, _)| e == id) {
                overlap += 1;
            }
        }
        total += overlap as f64 / k as f64;
    }
    Ok(total / queries.len() as f64)
}

const MAGIC: &[u8; 8] = b"UIAIDX01";

impl DenseIndex {
    /// Layout: magic, version, d, M, tag, raw little-endian vectors, id table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.tag.len() as u64).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.item_ids {
            out.extend_from_slice(&(id.len() as u64).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    /// `expected_dim` (when given) must match the stored dimensionality.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self, IndexError> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], IndexError> {
            if *pos + n > bytes.len() {
                return Err(IndexError::Truncated);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let mut pos = 0usize;
        if take(&mut pos, 8)? != MAGIC {
            return Err(IndexError::BadHeader);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let dim = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(IndexError::DimMismatch {
                    expected,
                    found: dim,
                });
            }
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let tag_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let tag = String::from_utf8(take(&mut pos, tag_len)?.to_vec())
            .map_err(|_| IndexError::BadHeader)?;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        let mut item_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(&mut pos, len)?.to_vec())
                .map_err(|_| IndexError::BadHeader)?;
            item_ids.push(id);
        }
        DenseIndex::new(Matrix::from_vec(count, dim, data), item_ids, tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexError {
    EmptyCollection,
    EmptyTag,
    NonFiniteVector,
    IdCountMismatch { vectors: usize, ids: usize },
    DimMismatch { expected: usize, found: usize },
    EfTooSmall { ef: usize, k: usize },
    Encode { item_id: String, reason: String },
    BadHeader,
    UnsupportedVersion(u32),
    Truncated,
    TagMismatch { index_tag: String, checkpoint_tag: String },
}

impl fmt::Display for IndexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndexError::EmptyCollection => write!(f, "cannot index an empty collection"),
            IndexError::EmptyTag => write!(f, "index provenance tag must be nonempty"),
            IndexError::NonFiniteVector => write!(f, "index vectors must be finite"),
            IndexError::IdCountMismatch { vectors, ids } => {
                write!(f, "{vectors} vectors but {ids} item ids")
            }
            IndexError::DimMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            IndexError::EfTooSmall { ef, k } => {
                write!(f, "ef_search {ef} must be at least k {k}")
            }
            IndexError::Encode { item_id, reason } => {
                write!(f, "failed to encode item {item_id:?}: {reason}")
            }
            IndexError::BadHeader => write!(f, "malformed index data"),
            IndexError::UnsupportedVersion(v) => write!(f, "unsupported index version {v}"),
            IndexError::Truncated => write!(f, "index data is truncated"),
            IndexError::TagMismatch {
                index_tag,
                checkpoint_tag,
            } => write!(
                f,
                "index tag {index_tag} does not match checkpoint tag {checkpoint_tag}"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for IndexError {}

/// Refuses tag-mismatched checkpoint/index pairs.
pub fn check_provenance(index: &DenseIndex, checkpoint_tag: &str) -> Result<(), IndexError> {
    if index.tag() != checkpoint_tag {
        return Err(IndexError::TagMismatch {
            index_tag: index.tag().to_string(),
            checkpoint_tag: checkpoint_tag.to_string(),
        });
    }
    Ok(())
}
