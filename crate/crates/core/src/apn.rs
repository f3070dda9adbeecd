//! Attentive personalization network.
//!
//! Multi-head attention from the user's recent interaction history to the
//! current request: past request encodings act as keys, past clicked-item
//! encodings as values, the current request encoding as the query. Head
//! outputs are concatenated, joined with the request through add-&-norm,
//! fused with collaborative user and functionality embeddings through a
//! ReLU feed-forward, and item vectors pass through a small adapter so both
//! sides live in the personalized space.
//!
//! Everything here is hand-differentiated; the backward pass returns exact
//! gradients for every parameter and for the request/history inputs so the
//! encoders train end-to-end.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use crate::math;
use crate::matrix::{add_assign, add_scaled, Matrix};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Width configuration for the personalization network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApnDims {
    /// Shared encoder output dimensionality d.
    pub dim: usize,
    /// Number of attention heads.
    pub num_heads: usize,
    /// Per-head key/query width l.
    pub key_dim: usize,
    /// Per-head value width l_v; `num_heads * value_dim == dim` is required
    /// for the residual in add-&-norm.
    pub value_dim: usize,
    /// User embedding width l_u.
    pub user_dim: usize,
    /// Functionality embedding width l_f.
    pub func_dim: usize,
}

impl ApnDims {
    pub fn validate(&self) -> Result<(), ApnError> {
        if self.num_heads * self.value_dim != self.dim {
            return Err(ApnError::HeadDimMismatch {
                num_heads: self.num_heads,
                value_dim: self.value_dim,
                dim: self.dim,
            });
        }
        Ok(())
    }

    fn fusion_in_dim(&self) -> usize {
        self.dim + self.user_dim + self.func_dim
    }
}

/// Encodings of the user's last-N interactions: one matrix of past request
/// encodings and one of past clicked-item encodings. Rows past `valid_rows`
/// are zero padding and receive exactly zero attention.
#[derive(Debug, Clone)]
pub struct HistoryEncodings {
    req: Vec<Vec<f64>>,
    item: Vec<Vec<f64>>,
    valid_rows: usize,
}

impl HistoryEncodings {
    pub fn new(capacity: usize, dim: usize) -> Self {
        HistoryEncodings {
            req: vec![vec![0.0; dim]; capacity],
            item: vec![vec![0.0; dim]; capacity],
            valid_rows: 0,
        }
    }

    pub fn push(&mut self, request_encoding: Vec<f64>, item_encoding: Vec<f64>) {
        assert!(self.valid_rows < self.req.len(), "history window full");
        self.req[self.valid_rows] = request_encoding;
        self.item[self.valid_rows] = item_encoding;
        self.valid_rows += 1;
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn capacity(&self) -> usize {
        self.req.len()
    }

    pub fn request_row(&self, i: usize) -> &[f64] {
        &self.req[i]
    }

    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item[i]
    }
}

/// Query/key/value projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub query: Matrix, // d x l
    pub key: Matrix,   // d x l
    pub value: Matrix, // d x l_v
}

/// All learnable personalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ApnParams {
    pub dims: ApnDims,
    pub heads: Vec<HeadParams>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// `num_users + 1` rows; the final row is the cold-start fallback.
    pub user_embedding: Matrix,
    pub functionality_embedding: Matrix, // 3 x l_f
    pub fusion_w: Matrix,                // (d + l_u + l_f) x d
    pub fusion_b: Vec<f64>,
    pub adapter_w1: Matrix, // d x d
    pub adapter_b1: Vec<f64>,
    pub adapter_w2: Matrix, // d x d
    pub adapter_b2: Vec<f64>,
}

impl ApnParams {
    pub fn init(dims: ApnDims, num_users: usize, rng: &mut Rng) -> Result<Self, ApnError> {
        dims.validate()?;
        let d = dims.dim;
        let heads = (0..dims.num_heads)
            .map(|_| HeadParams {
                query: Matrix::uniform_init(d, dims.key_dim, d, rng),
                key: Matrix::uniform_init(d, dims.key_dim, d, rng),
                value: Matrix::uniform_init(d, dims.value_dim, d, rng),
            })
            .collect();
        // adapter starts near identity so fine-tuning begins from the
        // pre-trained geometry
        let mut adapter_w1 = Matrix::identity(d);
        let mut adapter_w2 = Matrix::identity(d);
        for m in [&mut adapter_w1, &mut adapter_w2] {
            for v in m.data_mut() {
                *v += rng.next_range(-0.01, 0.01);
            }
        }
        Ok(ApnParams {
            dims,
            heads,
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            user_embedding: Matrix::uniform_init(num_users + 1, dims.user_dim, dims.user_dim, rng),
            functionality_embedding: Matrix::uniform_init(3, dims.func_dim, dims.func_dim, rng),
            fusion_w: Matrix::uniform_init(dims.fusion_in_dim(), d, dims.fusion_in_dim(), rng),
            fusion_b: vec![0.0; d],
            adapter_w1,
            adapter_b1: vec![0.0; d],
            adapter_w2,
            adapter_b2: vec![0.0; d],
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_embedding.rows() - 1
    }

    /// Row index of the shared cold-start user embedding.
    pub fn fallback_user_row(&self) -> usize {
        self.user_embedding.rows() - 1
    }
}

/// Gradient buffers shaped like [`ApnParams`].
#[derive(Debug, Clone)]
pub struct ApnGrads {
    pub heads: Vec<HeadParams>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub user_embedding: Matrix,
    pub functionality_embedding: Matrix,
    pub fusion_w: Matrix,
    pub fusion_b: Vec<f64>,
    pub adapter_w1: Matrix,
    pub adapter_b1: Vec<f64>,
    pub adapter_w2: Matrix,
    pub adapter_b2: Vec<f64>,
}

impl ApnGrads {
    pub fn zeros_like(params: &ApnParams) -> Self {
        let d = params.dims.dim;
        ApnGrads {
            heads: params
                .heads
                .iter()
                .map(|h| HeadParams {
                    query: Matrix::zeros(h.query.rows(), h.query.cols()),
                    key: Matrix::zeros(h.key.rows(), h.key.cols()),
                    value: Matrix::zeros(h.value.rows(), h.value.cols()),
                })
                .collect(),
            ln_gain: vec![0.0; d],
            ln_bias: vec![0.0; d],
            user_embedding: Matrix::zeros(params.user_embedding.rows(), params.dims.user_dim),
            functionality_embedding: Matrix::zeros(3, params.dims.func_dim),
            fusion_w: Matrix::zeros(params.fusion_w.rows(), params.fusion_w.cols()),
            fusion_b: vec![0.0; d],
            adapter_w1: Matrix::zeros(d, d),
            adapter_b1: vec![0.0; d],
            adapter_w2: Matrix::zeros(d, d),
            adapter_b2: vec![0.0; d],
        }
    }
}

/// Attention weights and projections of one head, kept for backward.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    /// Softmax weights over valid rows; padded rows are absent (weight 0).
    pub weights: Vec<f64>,
}

/// Full forward record for one personalization pass.
#[derive(Debug, Clone)]
pub struct ApnTrace {
    request: Vec<f64>,
    heads: Vec<HeadTrace>, // empty on the cold-start path
    normalized: Vec<f64>,
    inv_std: f64,
    fusion_in: Vec<f64>,
    fusion_pre: Vec<f64>,
    user_row: usize,
    functionality: usize,
    valid_rows: usize,
}

impl ApnTrace {
    pub fn user_row(&self) -> usize {
        self.user_row
    }
}

/// One attention head: `softmax(q K^T / sqrt(l)) V` over the valid history
/// rows. Padded rows receive weight exactly zero.
pub fn attention_head(
    head: &HeadParams,
    request: &[f64],
    history: &HistoryEncodings,
) -> Result<(Vec<f64>, HeadTrace), ApnError> {
    let valid = history.valid_rows();
    if valid == 0 {
        return Err(ApnError::EmptyHistory);
    }
    let l = head.query.cols();
    let query = head.query.vec_mul(request);
    let mut keys = Vec::with_capacity(valid);
    let mut values = Vec::with_capacity(valid);
    let mut logits = Vec::with_capacity(valid);
    let scale = 1.0 / math::sqrt(l as f64);
    for i in 0..valid {
        let k = head.key.vec_mul(history.request_row(i));
        let v = head.value.vec_mul(history.item_row(i));
        logits.push(math::dot(&query, &k) * scale);
        keys.push(k);
        values.push(v);
    }
    let weights = softmax(&logits);
    let mut out = vec![0.0; head.value.cols()];
    for i in 0..valid {
        add_scaled(&mut out, &values[i], weights[i]);
    }
    Ok((
        out,
        HeadTrace {
            query,
            keys,
            values,
            weights,
        },
    ))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| math::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
    let normalized: Vec<f64> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let out: Vec<f64> = normalized
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&n, (&g, &b))| g * n + b)
        .collect();
    (out, normalized, inv_std)
}

fn finish_forward(
    params: &ApnParams,
    request: &[f64],
    concat_heads: Vec<f64>,
    head_traces: Vec<HeadTrace>,
    user_row: usize,
    functionality: usize,
    valid_rows: usize,
) -> (Vec<f64>, ApnTrace) {
    let dims = &params.dims;
    let mut added = concat_heads;
    add_assign(&mut added, request);
    let (ln_out, normalized, inv_std) = layer_norm(&added, &params.ln_gain, &params.ln_bias);

    let mut fusion_in = Vec::with_capacity(dims.fusion_in_dim());
    fusion_in.extend_from_slice(&ln_out);
    fusion_in.extend_from_slice(params.user_embedding.row(user_row));
    fusion_in.extend_from_slice(params.functionality_embedding.row(functionality));

    let mut fusion_pre = params.fusion_w.vec_mul(&fusion_in);
    for (v, b) in fusion_pre.iter_mut().zip(&params.fusion_b) {
        *v += b;
    }
    let r_star: Vec<f64> = fusion_pre.iter().map(|&v| math::relu(v)).collect();

    let trace = ApnTrace {
        request: request.to_vec(),
        heads: head_traces,
        normalized,
        inv_std,
        fusion_in,
        fusion_pre,
        user_row,
        functionality,
        valid_rows,
    };
    (r_star, trace)
}

/// Personalized request representation for a user with history.
///
/// `user_row` indexes the user-embedding matrix (use
/// [`ApnParams::fallback_user_row`] for users outside it).
pub fn apn_forward(
    params: &ApnParams,
    request: &[f64],
    history: &HistoryEncodings,
    user_row: usize,
    functionality: usize,
) -> Result<(Vec<f64>, ApnTrace), ApnError> {
    if history.valid_rows() == 0 {
        return Err(ApnError::EmptyHistory);
    }
    let mut concat = Vec::with_capacity(params.dims.dim);
    let mut traces = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let (out, trace) = attention_head(head, request, history)?;
        concat.extend_from_slice(&out);
        traces.push(trace);
    }
    Ok(finish_forward(
        params,
        request,
        concat,
        traces,
        user_row,
        functionality,
        history.valid_rows(),
    ))
}

/// Personalization path for users with no usable history: attention is
/// skipped (head output identically zero) and the shared fallback
/// user-embedding row stands in for the user.
pub fn cold_start_forward(
    params: &ApnParams,
    request: &[f64],
    functionality: usize,
) -> (Vec<f64>, ApnTrace) {
    let concat = vec![0.0; params.dims.dim];
    finish_forward(
        params,
        request,
        concat,
        Vec::new(),
        params.fallback_user_row(),
        functionality,
        0,
    )
}

/// Item-side adapter: affine, ReLU, affine; all d -> d.
pub fn item_adapter(params: &ApnParams, item: &[f64]) -> Vec<f64> {
    item_adapter_traced(params, item).0
}

#[derive(Debug, Clone)]
pub struct AdapterTrace {
    input: Vec<f64>,
    pre_relu: Vec<f64>,
    hidden: Vec<f64>,
}

pub fn item_adapter_traced(params: &ApnParams, item: &[f64]) -> (Vec<f64>, AdapterTrace) {
    let mut pre = params.adapter_w1.vec_mul(item);
    for (v, b) in pre.iter_mut().zip(&params.adapter_b1) {
        *v += b;
    }
    let hidden: Vec<f64> = pre.iter().map(|&v| math::relu(v)).collect();
    let mut out = params.adapter_w2.vec_mul(&hidden);
    for (v, b) in out.iter_mut().zip(&params.adapter_b2) {
        *v += b;
    }
    (
        out,
        AdapterTrace {
            input: item.to_vec(),
            pre_relu: pre,
            hidden,
        },
    )
}

/// Gradients of `upstream . item_adapter(item)`; returns the gradient w.r.t.
/// the item vector.
pub fn item_adapter_backward(
    params: &ApnParams,
    trace: &AdapterTrace,
    upstream: &[f64],
    grads: &mut ApnGrads,
) -> Vec<f64> {
    grads.adapter_w2.add_outer(&trace.hidden, upstream);
    add_scaled(&mut grads.adapter_b2, upstream, 1.0);
    let d_hidden = params.adapter_w2.mul_vec(upstream);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.pre_relu)
        .map(|(&g, &z)| g * math::relu_grad(z))
        .collect();
    grads.adapter_w1.add_outer(&trace.input, &d_pre);
    add_scaled(&mut grads.adapter_b1, &d_pre, 1.0);
    params.adapter_w1.mul_vec(&d_pre)
}

/// Inner product of the personalized request and adapted item vectors.
pub fn personalized_score(r_star: &[f64], i_star: &[f64]) -> Result<f64, ApnError> {
    if r_star.len() != i_star.len() {
        return Err(ApnError::DimMismatch {
            left: r_star.len(),
            right: i_star.len(),
        });
    }
    Ok(math::dot(r_star, i_star))
}

/// Gradients flowing out of the personalization network into its inputs.
#[derive(Debug, Clone)]
pub struct ApnInputGrads {
    pub request: Vec<f64>,
    /// One gradient per valid history row, w.r.t. past request encodings.
    pub history_req: Vec<Vec<f64>>,
    /// One gradient per valid history row, w.r.t. past item encodings.
    pub history_item: Vec<Vec<f64>>,
}

/// Exact gradients of `upstream . r_star` for all parameters and inputs.
/// Works for both the attentive and the cold-start path (the trace records
/// which one ran). Padded history rows receive zero gradient by
/// construction.
pub fn apn_backward(
    params: &ApnParams,
    trace: &ApnTrace,
    history: Option<&HistoryEncodings>,
    upstream: &[f64],
    grads: &mut ApnGrads,
) -> ApnInputGrads {
    let dims = &params.dims;
    let d = dims.dim;

    // fusion: r_star = relu(fusion_in * W + b)
    let d_fusion_pre: Vec<f64> = upstream
        .iter()
        .zip(&trace.fusion_pre)
        .map(|(&g, &z)| g * math::relu_grad(z))
        .collect();
    grads.fusion_w.add_outer(&trace.fusion_in, &d_fusion_pre);
    add_scaled(&mut grads.fusion_b, &d_fusion_pre, 1.0);
    let d_fusion_in = params.fusion_w.mul_vec(&d_fusion_pre);

    let (d_ln_out, rest) = d_fusion_in.split_at(d);
    let (d_user, d_func) = rest.split_at(dims.user_dim);
    add_scaled(grads.user_embedding.row_mut(trace.user_row), d_user, 1.0);
    add_scaled(
        grads.functionality_embedding.row_mut(trace.functionality),
        d_func,
        1.0,
    );

    // layer norm
    let mut d_added = vec![0.0; d];
    {
        let mut g_pre = vec![0.0; d];
        for i in 0..d {
            grads.ln_gain[i] += d_ln_out[i] * trace.normalized[i];
            grads.ln_bias[i] += d_ln_out[i];
            g_pre[i] = d_ln_out[i] * params.ln_gain[i];
        }
        let mean_g = g_pre.iter().sum::<f64>() / d as f64;
        let mean_gn = g_pre
            .iter()
            .zip(&trace.normalized)
            .map(|(&g, &n)| g * n)
            .sum::<f64>()
            / d as f64;
        for i in 0..d {
            d_added[i] = trace.inv_std * (g_pre[i] - mean_g - trace.normalized[i] * mean_gn);
        }
    }

    // residual: added = concat_heads + request
    let mut d_request = d_added.clone();
    let valid = trace.valid_rows;
    let mut d_hist_req = vec![vec![0.0; d]; valid];
    let mut d_hist_item = vec![vec![0.0; d]; valid];

    if !trace.heads.is_empty() {
        let history = history.expect("history required to backprop attention");
        let l_v = dims.value_dim;
        let scale = 1.0 / math::sqrt(dims.key_dim as f64);
        for (j, (head, htrace)) in params.heads.iter().zip(&trace.heads).enumerate() {
            let g_head = &d_added[j * l_v..(j + 1) * l_v];
            // d value rows and softmax backward
            let mut d_weights = vec![0.0; valid];
            for i in 0..valid {
                d_weights[i] = math::dot(g_head, &htrace.values[i]);
            }
            let weighted: f64 = htrace
                .weights
                .iter()
                .zip(&d_weights)
                .map(|(&w, &dw)| w * dw)
                .sum();
            let mut d_query = vec![0.0; dims.key_dim];
            for i in 0..valid {
                let w = htrace.weights[i];
                // value path
                let mut d_v = vec![0.0; l_v];
                add_scaled(&mut d_v, g_head, w);
                grads.heads[j].value.add_outer(history.item_row(i), &d_v);
                add_assign(&mut d_hist_item[i], &head.value.mul_vec(&d_v));
                // logit path
                let d_logit = w * (d_weights[i] - weighted);
                add_scaled(&mut d_query, &htrace.keys[i], d_logit * scale);
                let mut d_k = vec![0.0; dims.key_dim];
                add_scaled(&mut d_k, &htrace.query, d_logit * scale);
                grads.heads[j].key.add_outer(history.request_row(i), &d_k);
                add_assign(&mut d_hist_req[i], &head.key.mul_vec(&d_k));
            }
            grads.heads[j].query.add_outer(&trace.request, &d_query);
            add_assign(&mut d_request, &head.query.mul_vec(&d_query));
        }
    }

    ApnInputGrads {
        request: d_request,
        history_req: d_hist_req,
        history_item: d_hist_item,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApnError {
    EmptyHistory,
    HeadDimMismatch {
        num_heads: usize,
        value_dim: usize,
        dim: usize,
    },
    DimMismatch {
        left: usize,
        right: usize,
    },
}

impl fmt::Display for ApnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ApnError::EmptyHistory => {
                write!(f, "history window is empty; use the cold-start path")
            }
            ApnError::HeadDimMismatch {
                num_heads,
                value_dim,
                dim,
            } => write!(
                f,
                "num_heads * value_dim must equal dim ({num_heads} * {value_dim} != {dim})"
            ),
            ApnError::DimMismatch { left, right } => {
                write!(f, "vector dimensions differ: {left} vs {right}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ApnError {}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims4() -> ApnDims {
        ApnDims {
            dim: 4,
            num_heads: 2,
            key_dim: 2,
            value_dim: 2,
            user_dim: 3,
            func_dim: 2,
        }
    }

    fn history_of(rows: &[(Vec<f64>, Vec<f64>)], capacity: usize, dim: usize) -> HistoryEncodings {
        let mut h = HistoryEncodings::new(capacity, dim);
        for (r, c) in rows {
            h.push(r.clone(), c.clone());
        }
        h
    }

    #[test]
    fn dim_invariant_is_enforced() {
        let bad = ApnDims { dim: 5, ..dims4() };
        assert!(matches!(
            ApnParams::init(bad, 2, &mut Rng::new(0)),
            Err(ApnError::HeadDimMismatch { .. })
        ));
    }

    #[test]
    fn paper_scale_divisor() {
        // with l = l_v = 64 the attention scale divisor is sqrt(64) = 8
        assert_eq!(math::sqrt(64.0), 8.0);
        let dims = ApnDims {
            dim: 768,
            num_heads: 12,
            key_dim: 64,
            value_dim: 64,
            user_dim: 128,
            func_dim: 64,
        };
        assert!(dims.validate().is_ok());
    }

    #[test]
    fn singleton_history_gets_full_weight() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(1)).unwrap();
        let h = history_of(
            &[(vec![0.1, 0.2, 0.3, 0.4], vec![1.0, -1.0, 0.5, 0.25])],
            5,
            4,
        );
        let (out, trace) = attention_head(&params.heads[0], &[0.4, 0.3, 0.2, 0.1], &h).unwrap();
        assert_eq!(trace.weights, vec![1.0]);
        let v = params.heads[0].value.vec_mul(h.item_row(0));
        assert_eq!(out, v);
    }

    #[test]
    fn zero_logits_give_uniform_weights() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(2)).unwrap();
        // zero request vector projects to a zero query, so all logits are 0
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|i| (vec![i as f64 + 1.0; 4], vec![i as f64; 4]))
            .collect();
        let h = history_of(&rows, 5, 4);
        let (_, trace) = attention_head(&params.heads[0], &[0.0; 4], &h).unwrap();
        for &w in &trace.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_matches_hand_arithmetic() {
        // d=4, l=l_v=2, N=2, hand-set projections
        let mut params = ApnParams::init(dims4(), 1, &mut Rng::new(3)).unwrap();
        let head = &mut params.heads[0];
        // query picks (x0, x1); key picks (x2, x3); value picks (x0+x3, x1)
        head.query = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        ]);
        head.key = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        head.value = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
        ]);
        let request = [1.0, 2.0, 0.0, 0.0];
        let hist_req = [vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        let hist_item = [vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 2.0, 3.0]];
        let h = history_of(
            &[
                (hist_req[0].clone(), hist_item[0].clone()),
                (hist_req[1].clone(), hist_item[1].clone()),
            ],
            2,
            4,
        );
        let (out, trace) = attention_head(&params.heads[0], &request, &h).unwrap();

        // q = (1,2); k_0 = (1,0), k_1 = (0,1)
        // logits = (1/sqrt2, 2/sqrt2); weights = softmax
        let s = 1.0 / math::sqrt(2.0);
        let l0 = 1.0 * s;
        let l1 = 2.0 * s;
        let e0 = math::exp(l0 - l1);
        let w1 = 1.0 / (1.0 + e0);
        let w0 = e0 / (1.0 + e0);
        assert!((trace.weights[0] - w0).abs() < 1e-12);
        assert!((trace.weights[1] - w1).abs() < 1e-12);
        // v_0 = (1+4, 2) = (5, 2); v_1 = (-1+3, 0.5) = (2, 0.5)
        let expect = [w0 * 5.0 + w1 * 2.0, w0 * 2.0 + w1 * 0.5];
        assert!((out[0] - expect[0]).abs() < 1e-12);
        assert!((out[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_padding_gets_zero() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(4)).unwrap();
        let mut rng = Rng::new(99);
        for valid in 1..=4usize {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..valid)
                .map(|_| {
                    (
                        (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                        (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                    )
                })
                .collect();
            let h = history_of(&rows, 6, 4);
            let request: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();
            let (_, trace) = attention_head(&params.heads[1], &request, &h).unwrap();
            let sum: f64 = trace.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(trace.weights.iter().all(|&w| w >= 0.0));
            // padded rows carry no weight entry at all
            assert_eq!(trace.weights.len(), valid);
        }
    }

    #[test]
    fn head_output_within_projected_row_hull() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(17);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| {
                (
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                )
            })
            .collect();
        let h = history_of(&rows, 4, 4);
        let request: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let (out, _) = attention_head(&params.heads[0], &request, &h).unwrap();
        let projected: Vec<Vec<f64>> = (0..4)
            .map(|i| params.heads[0].value.vec_mul(h.item_row(i)))
            .collect();
        for c in 0..2 {
            let lo = projected.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
            let hi = projected
                .iter()
                .map(|v| v[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn permuting_history_rows_permutes_weights() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(6)).unwrap();
        let mut rng = Rng::new(23);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                (
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                )
            })
            .collect();
        let request: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let h = history_of(&rows, 3, 4);
        let (out, trace) = attention_head(&params.heads[0], &request, &h).unwrap();

        let perm = [2usize, 0, 1];
        let permuted: Vec<(Vec<f64>, Vec<f64>)> =
            perm.iter().map(|&i| rows[i].clone()).collect();
        let hp = history_of(&permuted, 3, 4);
        let (out_p, trace_p) = attention_head(&params.heads[0], &request, &hp).unwrap();

        for (slot, &src) in perm.iter().enumerate() {
            assert!((trace_p.weights[slot] - trace.weights[src]).abs() < 1e-12);
        }
        for c in 0..out.len() {
            assert!((out[c] - out_p[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_is_standardized_before_gain() {
        let mut rng = Rng::new(31);
        for _ in 0..20 {
            let x: Vec<f64> = (0..16).map(|_| rng.next_range(-3.0, 3.0)).collect();
            let gain = vec![1.0; 16];
            let bias = vec![0.0; 16];
            let (out, _, _) = layer_norm(&x, &gain, &bias);
            let mean = out.iter().sum::<f64>() / 16.0;
            let var = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3); // epsilon shifts variance slightly
        }
    }

    #[test]
    fn forward_matches_staged_oracle() {
        // gain = 1, bias = 0, fusion = identity on the first d inputs and
        // zero on the u/f blocks: r_star = relu(layer_norm(concat + r_t))
        let dims = dims4();
        let mut params = ApnParams::init(dims, 2, &mut Rng::new(7)).unwrap();
        params.ln_gain = vec![1.0; 4];
        params.ln_bias = vec![0.0; 4];
        params.fusion_w = {
            let mut w = Matrix::zeros(dims.fusion_in_dim(), 4);
            for i in 0..4 {
                w.set(i, i, 1.0);
            }
            w
        };
        params.fusion_b = vec![0.0; 4];

        let mut rng = Rng::new(41);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..2)
            .map(|_| {
                (
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                )
            })
            .collect();
        let h = history_of(&rows, 2, 4);
        let request: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();

        let (r_star, _) = apn_forward(&params, &request, &h, 0, 1).unwrap();

        // oracle built stage by stage
        let mut concat = Vec::new();
        for head in &params.heads {
            let (out, _) = attention_head(head, &request, &h).unwrap();
            concat.extend_from_slice(&out);
        }
        add_assign(&mut concat, &request);
        let (ln, _, _) = layer_norm(&concat, &params.ln_gain, &params.ln_bias);
        let expect: Vec<f64> = ln.iter().map(|&v| math::relu(v)).collect();
        for i in 0..4 {
            assert!((r_star[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn different_users_produce_different_vectors() {
        let params = ApnParams::init(dims4(), 3, &mut Rng::new(8)).unwrap();
        let h = history_of(
            &[(vec![0.5, -0.5, 0.25, 1.0], vec![1.0, 0.0, -1.0, 0.5])],
            5,
            4,
        );
        let request = [0.2, 0.4, -0.6, 0.8];
        let (a, _) = apn_forward(&params, &request, &h, 0, 0).unwrap();
        let (b, _) = apn_forward(&params, &request, &h, 1, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn different_functionalities_produce_different_vectors() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(9)).unwrap();
        let h = history_of(
            &[(vec![0.5, -0.5, 0.25, 1.0], vec![1.0, 0.0, -1.0, 0.5])],
            5,
            4,
        );
        let request = [0.2, 0.4, -0.6, 0.8];
        let (a, _) = apn_forward(&params, &request, &h, 0, 1).unwrap();
        let (b, _) = apn_forward(&params, &request, &h, 0, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn adapter_zero_weights_give_zero() {
        let mut params = ApnParams::init(dims4(), 1, &mut Rng::new(10)).unwrap();
        params.adapter_w1.data_mut().fill(0.0);
        params.adapter_w2.data_mut().fill(0.0);
        params.adapter_b1.fill(0.0);
        params.adapter_b2.fill(0.0);
        assert_eq!(item_adapter(&params, &[1.0, 2.0, 3.0, 4.0]), vec![0.0; 4]);
    }

    #[test]
    fn adapter_identity_on_nonnegative_input() {
        let mut params = ApnParams::init(dims4(), 1, &mut Rng::new(11)).unwrap();
        params.adapter_w1 = Matrix::identity(4);
        params.adapter_w2 = Matrix::identity(4);
        params.adapter_b1.fill(0.0);
        params.adapter_b2.fill(0.0);
        let x = [0.5, 0.0, 2.0, 1.25];
        assert_eq!(item_adapter(&params, &x), x.to_vec());
    }

    #[test]
    fn adapter_matches_hand_computation() {
        let mut params = ApnParams::init(dims4(), 1, &mut Rng::new(12)).unwrap();
        params.adapter_w1 = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        params.adapter_b1 = vec![0.0, 0.0, 0.0, -1.0];
        params.adapter_w2 = Matrix::identity(4);
        params.adapter_b2 = vec![0.1, 0.1, 0.1, 0.1];
        let x = [1.0, 2.0, -0.5, 0.5];
        // pre = (1, -2, -1, -0.5); hidden = (1, 0, 0, 0); out = (1.1, 0.1, 0.1, 0.1)
        let out = item_adapter(&params, &x);
        assert_eq!(out, vec![1.1, 0.1, 0.1, 0.1]);
    }

    #[test]
    fn score_contract() {
        assert_eq!(personalized_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(personalized_score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let a = [0.3, -0.4, 0.9];
        let b = [1.5, 2.0, -0.25];
        let manual: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(personalized_score(&a, &b).unwrap(), manual);
        assert!(personalized_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cold_start_is_deterministic_and_finite() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(13)).unwrap();
        let request = [0.1, -0.2, 0.3, -0.4];
        let (a, _) = cold_start_forward(&params, &request, 0);
        let (b, _) = cold_start_forward(&params, &request, 0);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cold_start_differs_from_personalized_path() {
        let mut params = ApnParams::init(dims4(), 2, &mut Rng::new(14)).unwrap();
        // keep the ReLU from clipping every component to zero
        params.fusion_b = vec![0.5; 4];
        let h = history_of(
            &[(vec![0.5, -0.5, 0.25, 1.0], vec![1.0, 0.0, -1.0, 0.5])],
            5,
            4,
        );
        let request = [0.2, 0.4, -0.6, 0.8];
        let (warm, _) = apn_forward(&params, &request, &h, 0, 0).unwrap();
        let (cold, _) = cold_start_forward(&params, &request, 0);
        assert_ne!(warm, cold);
    }

    #[test]
    fn empty_history_is_rejected_by_attentive_path() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(15)).unwrap();
        let h = HistoryEncodings::new(5, 4);
        assert_eq!(
            apn_forward(&params, &[0.0; 4], &h, 0, 0).unwrap_err(),
            ApnError::EmptyHistory
        );
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = ApnParams::init(dims4(), 2, &mut Rng::new(16)).unwrap();
        let h = history_of(
            &[(vec![0.5, -0.5, 0.25, 1.0], vec![1.0, 0.0, -1.0, 0.5])],
            5,
            4,
        );
        let (_, trace) = apn_forward(&params, &[0.2, 0.4, -0.6, 0.8], &h, 0, 0).unwrap();
        let mut grads = ApnGrads::zeros_like(&params);
        let input = apn_backward(&params, &trace, Some(&h), &[0.0; 4], &mut grads);
        assert!(grads.fusion_w.data().iter().all(|&v| v == 0.0));
        assert!(grads.heads[0].query.data().iter().all(|&v| v == 0.0));
        assert!(input.request.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_users_get_zero_embedding_gradient() {
        let params = ApnParams::init(dims4(), 3, &mut Rng::new(17)).unwrap();
        let h = history_of(
            &[(vec![0.5, -0.5, 0.25, 1.0], vec![1.0, 0.0, -1.0, 0.5])],
            5,
            4,
        );
        let (_, trace) = apn_forward(&params, &[0.2, 0.4, -0.6, 0.8], &h, 1, 0).unwrap();
        let mut grads = ApnGrads::zeros_like(&params);
        apn_backward(&params, &trace, Some(&h), &[1.0, 1.0, 1.0, 1.0], &mut grads);
        for row in 0..params.user_embedding.rows() {
            let zero = grads.user_embedding.row(row).iter().all(|&v| v == 0.0);
            assert_eq!(zero, row != 1);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dims = dims4();
        let params = ApnParams::init(dims, 2, &mut Rng::new(18)).unwrap();
        let mut rng = Rng::new(77);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..2)
            .map(|_| {
                (
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                    (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect(),
                )
            })
            .collect();
        let h = history_of(&rows, 2, 4);
        let request: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let upstream: Vec<f64> = (0..4).map(|_| rng.next_range(-1.0, 1.0)).collect();

        let loss = |p: &ApnParams, req: &[f64], hist: &HistoryEncodings| {
            let (r_star, _) = apn_forward(p, req, hist, 0, 1).unwrap();
            math::dot(&r_star, &upstream)
        };

        let (_, trace) = apn_forward(&params, &request, &h, 0, 1).unwrap();
        let mut grads = ApnGrads::zeros_like(&params);
        let input = apn_backward(&params, &trace, Some(&h), &upstream, &mut grads);

        let step = 1e-6;
        let rel = |a: f64, n: f64| {
            let denom = a.abs().max(n.abs());
            if denom < 1e-7 {
                0.0
            } else {
                (a - n).abs() / denom
            }
        };

        // head parameters
        let mut p = params.clone();
        for (r, c) in [(0usize, 0usize), (2, 1)] {
            let orig = p.heads[1].query.get(r, c);
            p.heads[1].query.set(r, c, orig + step);
            let up = loss(&p, &request, &h);
            p.heads[1].query.set(r, c, orig - step);
            let down = loss(&p, &request, &h);
            p.heads[1].query.set(r, c, orig);
            assert!(rel(grads.heads[1].query.get(r, c), (up - down) / (2.0 * step)) < 1e-5);
        }
        for (r, c) in [(0usize, 0usize), (3, 1)] {
            let orig = p.heads[0].key.get(r, c);
            p.heads[0].key.set(r, c, orig + step);
            let up = loss(&p, &request, &h);
            p.heads[0].key.set(r, c, orig - step);
            let down = loss(&p, &request, &h);
            p.heads[0].key.set(r, c, orig);
            assert!(rel(grads.heads[0].key.get(r, c), (up - down) / (2.0 * step)) < 1e-5);
        }
        // layer norm, fusion, embeddings
        let orig = p.ln_gain[2];
        p.ln_gain[2] = orig + step;
        let up = loss(&p, &request, &h);
        p.ln_gain[2] = orig - step;
        let down = loss(&p, &request, &h);
        p.ln_gain[2] = orig;
        assert!(rel(grads.ln_gain[2], (up - down) / (2.0 * step)) < 1e-5);

        let orig = p.fusion_w.get(5, 1);
        p.fusion_w.set(5, 1, orig + step);
        let up = loss(&p, &request, &h);
        p.fusion_w.set(5, 1, orig - step);
        let down = loss(&p, &request, &h);
        p.fusion_w.set(5, 1, orig);
        assert!(rel(grads.fusion_w.get(5, 1), (up - down) / (2.0 * step)) < 1e-5);

        let orig = p.user_embedding.get(0, 1);
        p.user_embedding.set(0, 1, orig + step);
        let up = loss(&p, &request, &h);
        p.user_embedding.set(0, 1, orig - step);
        let down = loss(&p, &request, &h);
        p.user_embedding.set(0, 1, orig);
        assert!(rel(grads.user_embedding.get(0, 1), (up - down) / (2.0 * step)) < 1e-5);

        // request input gradient
        let mut req = request.clone();
        let orig = req[3];
        req[3] = orig + step;
        let up = loss(&p, &req, &h);
        req[3] = orig - step;
        let down = loss(&p, &req, &h);
        req[3] = orig;
        assert!(rel(input.request[3], (up - down) / (2.0 * step)) < 1e-5);

        // history input gradients
        let mut rows2 = rows.clone();
        let orig = rows2[1].1[2];
        rows2[1].1[2] = orig + step;
        let up = loss(&p, &request, &history_of(&rows2, 2, 4));
        rows2[1].1[2] = orig - step;
        let down = loss(&p, &request, &history_of(&rows2, 2, 4));
        rows2[1].1[2] = orig;
        assert!(rel(input.history_item[1][2], (up - down) / (2.0 * step)) < 1e-5);
    }
}
