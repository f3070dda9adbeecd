//! Trainable request and item encoders.
//!
//! Both sides share one architecture: token + segment embeddings are mean
//! pooled over non-special positions and mapped through two affine layers
//! with a ReLU in between. Request inputs carry the functionality
//! description as a second segment; item inputs are single-segment. The two
//! encoders never share parameters but always share the output width.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use crate::corpus::{FunctionalityDescriptor, ItemCollection, Request, RequestPayload};
use crate::lexical::tokenize;
use crate::math;
use crate::matrix::{add_scaled, Matrix};
use crate::rng::Rng;

pub const CLS_ID: u32 = 0;
pub const SEP_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const NUM_SPECIALS: u32 = 3;

/// Term-to-id map with CLS/SEP/UNK specials at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Terms with corpus frequency >= `min_count`, ordered by descending
    /// frequency then lexicographically, ids starting after the specials.
    pub fn build<'a, I>(texts: I, min_count: usize) -> Result<Self, EncoderError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        assert!(min_count >= 1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut terms = Vec::with_capacity(ranked.len());
        let mut ids = BTreeMap::new();
        for (offset, (term, _)) in ranked.into_iter().enumerate() {
            ids.insert(term.clone(), NUM_SPECIALS + offset as u32);
            terms.push(term);
        }
        Ok(Vocabulary { terms, ids })
    }

    /// Reconstructs a vocabulary from terms listed in id order.
    pub fn from_terms(terms: Vec<String>) -> Self {
        let ids = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), NUM_SPECIALS + i as u32))
            .collect();
        Vocabulary { terms, ids }
    }

    /// Total id count including the three specials.
    pub fn len(&self) -> usize {
        self.terms.len() + NUM_SPECIALS as usize
    }

    pub fn is_empty(&self) -> bool {
        false // specials always present
    }

    pub fn id_of(&self, term: &str) -> u32 {
        self.ids.get(term).copied().unwrap_or(UNK_ID)
    }

    /// Corpus terms in id order (specials excluded).
    pub fn terms(&self) -> &[String] {
        &self.terms
    }
}

/// Segment labels: A carries request or item text, B the functionality
/// description (request side only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    A = 0,
    B = 1,
}

/// Token ids plus segment labels, CLS-initial with SEP-terminated segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedInput {
    pub token_ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl ComposedInput {
    fn assemble(seg_a: &[u32], seg_b: Option<&[u32]>, max_len: usize) -> Result<Self, EncoderError> {
        let overhead = 2 + seg_b.map_or(0, |_| 1); // CLS + SEP per segment
        assert!(max_len > overhead, "max length leaves no room for content");
        let b_len = seg_b.map_or(0, <[u32]>::len);
        // segment A is truncated first; B only shrinks once A is exhausted
        let budget = max_len - overhead;
        let (a_keep, b_keep) = if seg_a.len() + b_len <= budget {
            (seg_a.len(), b_len)
        } else if b_len <= budget {
            (budget - b_len, b_len)
        } else {
            (0, budget)
        };

        let mut token_ids = Vec::with_capacity(overhead + a_keep + b_keep);
        let mut segments = Vec::with_capacity(token_ids.capacity());
        token_ids.push(CLS_ID);
        segments.push(Segment::A);
        token_ids.extend_from_slice(&seg_a[..a_keep]);
        segments.extend(core::iter::repeat(Segment::A).take(a_keep));
        token_ids.push(SEP_ID);
        segments.push(Segment::A);
        if let Some(b) = seg_b {
            token_ids.extend_from_slice(&b[..b_keep]);
            segments.extend(core::iter::repeat(Segment::B).take(b_keep));
            token_ids.push(SEP_ID);
            segments.push(Segment::B);
        }
        Ok(ComposedInput { token_ids, segments })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn content_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != CLS_ID && id != SEP_ID)
            .map(|(i, _)| i)
    }
}

fn to_ids(tokens: &[String], vocab: &Vocabulary) -> Vec<u32> {
    tokens.iter().map(|t| vocab.id_of(t)).collect()
}

/// Composes the request-side input: segment A is the query text or the
/// anchor item's text, segment B the functionality description.
pub fn compose_request_input(
    request: &Request,
    descriptor: &FunctionalityDescriptor,
    items: &ItemCollection,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ComposedInput, EncoderError> {
    debug_assert_eq!(descriptor.functionality, request.functionality);
    let text = match &request.payload {
        RequestPayload::QueryText(q) => q.as_str(),
        RequestPayload::AnchorItem(id) => {
            let ord = items
                .ordinal_of(id)
                .ok_or_else(|| EncoderError::UnresolvedAnchor(id.clone()))?;
            items.get(ord).text.as_str()
        }
    };
    let seg_a = to_ids(&tokenize(text), vocab);
    let seg_b = to_ids(&tokenize(&descriptor.description), vocab);
    if seg_a.is_empty() && seg_b.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    ComposedInput::assemble(&seg_a, Some(&seg_b), max_len)
}

/// Request-side input without the functionality description segment.
pub fn compose_request_input_no_functionality(
    request: &Request,
    items: &ItemCollection,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ComposedInput, EncoderError> {
    let text = match &request.payload {
        RequestPayload::QueryText(q) => q.as_str(),
        RequestPayload::AnchorItem(id) => {
            let ord = items
                .ordinal_of(id)
                .ok_or_else(|| EncoderError::UnresolvedAnchor(id.clone()))?;
            items.get(ord).text.as_str()
        }
    };
    let seg_a = to_ids(&tokenize(text), vocab);
    if seg_a.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    ComposedInput::assemble(&seg_a, None, max_len)
}

/// Composes the item-side input: single segment of item text.
pub fn compose_item_input(
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ComposedInput, EncoderError> {
    let seg_a = to_ids(&tokenize(text), vocab);
    if seg_a.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    ComposedInput::assemble(&seg_a, None, max_len)
}

/// One encoder side: embedding tables plus the two-layer projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Matrix,   // |V| x d_e
    pub segment_embedding: Matrix, // 2 x d_e
    pub w1: Matrix,                // d_e x d (applied as x * w1)
    pub b1: Vec<f64>,
    pub w2: Matrix, // d x d
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub fn init(vocab_size: usize, embed_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        EncoderParams {
            token_embedding: Matrix::uniform_init(vocab_size, embed_dim, embed_dim, rng),
            segment_embedding: Matrix::uniform_init(2, embed_dim, embed_dim, rng),
            w1: Matrix::uniform_init(embed_dim, out_dim, embed_dim, rng),
            b1: vec![0.0; out_dim],
            w2: Matrix::uniform_init(out_dim, out_dim, out_dim, rng),
            b2: vec![0.0; out_dim],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }
}

/// Zero-initialized gradient buffers shaped like [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub token_embedding: Matrix,
    pub segment_embedding: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            token_embedding: Matrix::zeros(params.token_embedding.rows(), params.embed_dim()),
            segment_embedding: Matrix::zeros(2, params.embed_dim()),
            w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: vec![0.0; params.b1.len()],
            w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: vec![0.0; params.b2.len()],
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pooled: Vec<f64>,
    pre_relu: Vec<f64>,
    hidden: Vec<f64>,
    positions: Vec<(usize, usize)>, // (token id, segment) of pooled positions
}

/// Mean pooling over non-special positions followed by the two-layer head.
/// Pure function of `(params, input)`.
pub fn encode(params: &EncoderParams, input: &ComposedInput) -> Vec<f64> {
    encode_traced(params, input).0
}

pub fn encode_traced(params: &EncoderParams, input: &ComposedInput) -> (Vec<f64>, EncoderTrace) {
    let d_e = params.embed_dim();
    let mut pooled = vec![0.0; d_e];
    let mut positions = Vec::new();
    for pos in input.content_positions() {
        let tok = input.token_ids[pos] as usize;
        let seg = input.segments[pos] as usize;
        positions.push((tok, seg));
        let te = params.token_embedding.row(tok);
        let se = params.segment_embedding.row(seg);
        for i in 0..d_e {
            pooled[i] += te[i] + se[i];
        }
    }
    let n = positions.len().max(1) as f64;
    for v in &mut pooled {
        *v /= n;
    }

    let mut pre_relu = params.w1.vec_mul(&pooled);
    for (v, b) in pre_relu.iter_mut().zip(&params.b1) {
        *v += b;
    }
    let hidden: Vec<f64> = pre_relu.iter().map(|&v| math::relu(v)).collect();
    let mut out = params.w2.vec_mul(&hidden);
    for (v, b) in out.iter_mut().zip(&params.b2) {
        *v += b;
    }
    (
        out,
        EncoderTrace {
            pooled,
            pre_relu,
            hidden,
            positions,
        },
    )
}

/// Accumulates exact gradients of `upstream . encode(params, input)` into
/// `grads`. Unused vocabulary rows receive no gradient.
pub fn encode_backward(
    params: &EncoderParams,
    trace: &EncoderTrace,
    upstream: &[f64],
    grads: &mut EncoderGrads,
) {
    let d_e = params.embed_dim();
    // out = hidden * w2 + b2
    grads.w2.add_outer(&trace.hidden, upstream);
    add_scaled(&mut grads.b2, upstream, 1.0);
    let d_hidden = params.w2.mul_vec(upstream);

    // hidden = relu(pooled * w1 + b1)
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.pre_relu)
        .map(|(&g, &z)| g * math::relu_grad(z))
        .collect();
    grads.w1.add_outer(&trace.pooled, &d_pre);
    add_scaled(&mut grads.b1, &d_pre, 1.0);
    let d_pooled = params.w1.mul_vec(&d_pre);

    // pooled = mean of token+segment embeddings
    let n = trace.positions.len().max(1) as f64;
    let mut scaled = vec![0.0; d_e];
    for i in 0..d_e {
        scaled[i] = d_pooled[i] / n;
    }
    for &(tok, seg) in &trace.positions {
        add_scaled(grads.token_embedding.row_mut(tok), &scaled, 1.0);
        add_scaled(grads.segment_embedding.row_mut(seg), &scaled, 1.0);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderError {
    EmptyCorpus,
    EmptyInput,
    UnresolvedAnchor(String),
}

impl fmt::Display for EncoderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderError::EmptyCorpus => write!(f, "no text available to build a vocabulary"),
            EncoderError::EmptyInput => write!(f, "input has no content tokens"),
            EncoderError::UnresolvedAnchor(id) => {
                write!(f, "anchor item {id:?} does not resolve in the collection")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EncoderError {}
