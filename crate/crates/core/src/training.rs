//! Loss computation, hard-negative mining, the Adam optimizer, and the
//! training pipeline: phase-1 pre-training with lexical negatives, phase-2
//! pre-training with self-mined negatives from a dense index, and
//! personalized fine-tuning of the full model.
//!
//! Every run is a pure function of its seed: mining, shuffling, and
//! initialization draw from forked deterministic generators, and gradient
//! accumulation follows a fixed order, so repeated runs produce bitwise
//! identical checkpoints.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use crate::apn::{
    apn_backward, apn_forward, cold_start_forward, item_adapter_backward, item_adapter_traced,
    AdapterTrace, ApnTrace, HistoryEncodings,
};
use crate::corpus::{
    default_descriptors, filter_users_for_finetune, DatasetSplit, FinetuneThresholds,
    Functionality, InteractionLog, ItemCollection, Request,
};
use crate::encoder::{
    compose_item_input, compose_request_input, compose_request_input_no_functionality,
    encode_backward, encode_traced, ComposedInput, EncoderTrace, Vocabulary,
};
use crate::eval::{evaluate, EvalConfig, EvalMode};
use crate::index::{build_dense_index, check_provenance, DenseIndex};
use crate::lexical::{tokenize, LexicalIndex};
use crate::math;
use crate::matrix::add_scaled;
use crate::model::{ModelBundle, ModelConfig, ModelGrads, ModelParams};
use crate::rng::Rng;

/// One training instance: request, its positive, mined negatives, and
/// optionally the user context for personalized training.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Index of the originating interaction in the log.
    pub interaction: usize,
    pub functionality: Functionality,
    pub request: Request,
    /// Positive item ordinal.
    pub positive: usize,
    /// Mined negative item ordinals; never contains the positive.
    pub negatives: Vec<usize>,
    pub user: Option<UserContext>,
}

/// User context of a personalized example.
#[derive(Debug, Clone)]
pub struct UserContext {
    /// Row in the user-embedding matrix.
    pub user_row: usize,
    /// History interaction indices, chronological, at most N.
    pub history: Vec<usize>,
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain1: usize,
    pub epochs_pretrain2: usize,
    pub epochs_finetune: usize,
    /// Mined negatives per positive instance.
    pub neg_ratio: usize,
    /// Retrieval pool size for negative mining.
    pub pool_size: usize,
    pub seed: u64,
    pub thresholds: FinetuneThresholds,
    /// Train/evaluate without the functionality description segment.
    pub drop_functionality: bool,
    /// Restrict history windows to the request's functionality.
    pub history_same_functionality_only: bool,
    /// Zero and freeze the collaborative user/functionality embeddings.
    pub freeze_collaborative: bool,
    /// Restrict training data to one functionality.
    pub only_functionality: Option<Functionality>,
    /// Re-initialize parameters at the start of phase 2 instead of
    /// continuing from the phase-1 checkpoint.
    pub reinit_before_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_pretrain: 7e-6,
            lr_finetune: 7e-5,
            epochs_pretrain1: 3,
            epochs_pretrain2: 2,
            epochs_finetune: 3,
            neg_ratio: 1,
            pool_size: 200,
            seed: 7,
            thresholds: FinetuneThresholds::default(),
            drop_functionality: false,
            history_same_functionality_only: false,
            freeze_collaborative: false,
            only_functionality: None,
            reinit_before_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if self.pool_size < self.neg_ratio.max(1) {
            return Err(TrainError::PoolSmallerThanRatio {
                pool: self.pool_size,
                ratio: self.neg_ratio,
            });
        }
        Ok(())
    }
}

/// Positive item ordinals per request key over the training split, used to
/// keep mined negatives disjoint from known positives.
pub fn collect_positives(
    log: &InteractionLog,
    train: &[usize],
    items: &ItemCollection,
) -> BTreeMap<String, BTreeSet<usize>> {
    let mut map: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for &idx in train {
        let inter = log.get(idx);
        let ord = items
            .ordinal_of(&inter.clicked_item_id)
            .expect("click validated at ingestion");
        map.entry(inter.request.key()).or_default().insert(ord);
    }
    map
}

/// Samples `ratio` negatives from the lexical top-`pool_size`, excluding all
/// known positives of the request; falls back to uniform corpus sampling
/// when the filtered pool runs dry.
pub fn mine_bm25_negatives(
    lexical: &LexicalIndex,
    items: &ItemCollection,
    request: &Request,
    positives: &BTreeSet<usize>,
    pool_size: usize,
    ratio: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    assert!(pool_size >= 1);
    let tokens = tokenize(request.text_form(items));
    let pool: Vec<usize> = lexical
        .topk(&tokens, pool_size)
        .into_iter()
        .map(|(ord, _)| ord)
        .filter(|ord| !positives.contains(ord))
        .collect();
    finish_sampling(pool, items.len(), positives, ratio, rng)
}

/// Phase-2 mining: the pool is the dense top-`pool_size` by inner product.
/// Refuses an index whose provenance tag differs from the checkpoint that
/// produced it.
pub fn mine_self_negatives(
    dense: &DenseIndex,
    checkpoint_tag: &str,
    request_vector: &[f64],
    num_items: usize,
    positives: &BTreeSet<usize>,
    pool_size: usize,
    ratio: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>, TrainError> {
    assert!(pool_size >= 1);
    check_provenance(dense, checkpoint_tag)
        .map_err(|e| TrainError::StaleIndex(format!("{e}")))?;
    let pool: Vec<usize> = dense
        .exact_topk(request_vector, pool_size)
        .map_err(|e| TrainError::StaleIndex(format!("{e}")))?
        .into_iter()
        .map(|(ord, _)| ord)
        .filter(|ord| !positives.contains(ord))
        .collect();
    Ok(finish_sampling(pool, num_items, positives, ratio, rng))
}

fn finish_sampling(
    pool: Vec<usize>,
    num_items: usize,
    positives: &BTreeSet<usize>,
    ratio: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut negatives = rng.sample_without_replacement(&pool, ratio);
    // uniform corpus fallback for the remainder
    let mut guard = 0;
    while negatives.len() < ratio && guard < 10_000 {
        let cand = rng.next_below(num_items);
        if !positives.contains(&cand) && !negatives.contains(&cand) {
            negatives.push(cand);
        }
        guard += 1;
    }
    debug_assert!(negatives.iter().all(|n| !positives.contains(n)));
    negatives
}

/// Per-example candidate scores; `items[0]` is the positive.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Softmax cross-entropy over each example's candidate set, positive as the
/// target. Duplicate item ids within one set are collapsed onto their first
/// occurrence (the positive survives); collapsed duplicates get zero
/// gradient. Returns the mean loss and per-score gradients aligned with the
/// input layout.
pub fn batch_loss(batch: &[CandidateSet]) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let b = batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for set in batch {
        assert_eq!(set.items.len(), set.scores.len());
        assert!(!set.items.is_empty());
        // dedup keeping first occurrence; the positive sits at index 0
        let mut keep = vec![true; set.items.len()];
        let mut seen = BTreeSet::new();
        for (i, item) in set.items.iter().enumerate() {
            if !seen.insert(*item) {
                keep[i] = false;
            }
        }
        let kept: Vec<usize> = (0..set.items.len()).filter(|&i| keep[i]).collect();
        let max = kept
            .iter()
            .map(|&i| set.scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = kept.iter().map(|&i| math::exp(set.scores[i] - max)).collect();
        let denom: f64 = exps.iter().sum();
        let p_positive = exps[0] / denom;
        total += -math::ln(p_positive.max(1e-300));

        let mut g = vec![0.0; set.scores.len()];
        for (slot, &i) in kept.iter().enumerate() {
            let softmax = exps[slot] / denom;
            let target = if slot == 0 { 1.0 } else { 0.0 };
            g[i] = (softmax - target) / b;
        }
        grads.push(g);
    }
    Ok((total / b, grads))
}

/// Adam accumulators aligned with the model's named-tensor enumeration.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let tensors = params.named_tensors();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            names: tensors.iter().map(|(n, _)| n.clone()).collect(),
            m: tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Bias-corrected Adam update over every tensor. Aborts on non-finite
/// gradients, naming the offending parameter group and step.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - math::powi(state.beta1, t as i32);
    let bc2 = 1.0 - math::powi(state.beta2, t as i32);
    let grad_tensors = grads.named_tensors();
    let mut param_tensors = params.named_tensors_mut();
    assert_eq!(grad_tensors.len(), param_tensors.len(), "grads shape-match params");
    assert_eq!(state.names.len(), param_tensors.len(), "state shape-match params");

    for (slot, ((pname, p), (gname, g))) in
        param_tensors.iter_mut().zip(&grad_tensors).enumerate()
    {
        assert_eq!(pname, gname);
        assert_eq!(&state.names[slot], pname);
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..p.len() {
            let grad = g[i];
            if !grad.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    name: pname.clone(),
                    step: t,
                });
            }
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad * grad;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (math::sqrt(v_hat) + state.eps);
        }
    }
    Ok(())
}

/// Per-example candidate item lists: the positive, its mined negatives,
/// then the positives of the other in-batch examples.
pub fn build_candidate_items(batch: &[TrainingExample]) -> Vec<Vec<usize>> {
    batch
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            let mut items = Vec::with_capacity(1 + ex.negatives.len() + batch.len() - 1);
            items.push(ex.positive);
            items.extend_from_slice(&ex.negatives);
            for (other, oex) in batch.iter().enumerate() {
                if other != k {
                    items.push(oex.positive);
                }
            }
            items
        })
        .collect()
}

struct RequestForward {
    vector: Vec<f64>,
    trace: EncoderTrace,
    apn: Option<ApnForward>,
}

struct ApnForward {
    r_star: Vec<f64>,
    trace: ApnTrace,
    history: HistoryEncodings,
    history_traces: Vec<(EncoderTrace, EncoderTrace)>, // (request, item) per row
}

fn compose_request(
    request: &Request,
    items: &ItemCollection,
    vocab: &Vocabulary,
    max_len: usize,
    drop_functionality: bool,
) -> Result<ComposedInput, TrainError> {
    let descriptors = default_descriptors();
    let input = if drop_functionality {
        compose_request_input_no_functionality(request, items, vocab, max_len)
    } else {
        compose_request_input(
            request,
            &descriptors[request.functionality.id() as usize],
            items,
            vocab,
            max_len,
        )
    };
    input.map_err(|e| TrainError::Encode(format!("{e}")))
}

/// Forward and backward over one batch; returns the loss and accumulated
/// gradients for every parameter. Personalized when the model carries a
/// personalization network and examples carry user context.
pub fn batch_step(
    params: &ModelParams,
    vocab: &Vocabulary,
    items: &ItemCollection,
    log: &InteractionLog,
    batch: &[TrainingExample],
    drop_functionality: bool,
) -> Result<(f64, ModelGrads), TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let config = &params.config;
    let personalized = params.apn.is_some();

    // encode each distinct candidate item once, in first-occurrence order
    let candidate_items = build_candidate_items(batch);
    let mut item_slots: BTreeMap<usize, usize> = BTreeMap::new();
    let mut distinct_items: Vec<usize> = Vec::new();
    for list in &candidate_items {
        for &ord in list {
            if !item_slots.contains_key(&ord) {
                item_slots.insert(ord, distinct_items.len());
                distinct_items.push(ord);
            }
        }
    }
    let mut item_vecs: Vec<Vec<f64>> = Vec::with_capacity(distinct_items.len());
    let mut item_traces: Vec<EncoderTrace> = Vec::with_capacity(distinct_items.len());
    let mut adapter_out: Vec<Vec<f64>> = Vec::new();
    let mut adapter_traces: Vec<AdapterTrace> = Vec::new();
    for &ord in &distinct_items {
        let input = compose_item_input(&items.get(ord).text, vocab, config.max_seq_len)
            .map_err(|e| TrainError::Encode(format!("{e}")))?;
        let (vec_, trace) = encode_traced(&params.item_encoder, &input);
        if let Some(apn) = &params.apn {
            let (adapted, atrace) = item_adapter_traced(apn, &vec_);
            adapter_out.push(adapted);
            adapter_traces.push(atrace);
        }
        item_vecs.push(vec_);
        item_traces.push(trace);
    }
    let final_item = |slot: usize| -> &[f64] {
        if personalized {
            &adapter_out[slot]
        } else {
            &item_vecs[slot]
        }
    };

    // request side, optionally through the personalization network
    let mut requests: Vec<RequestForward> = Vec::with_capacity(batch.len());
    let mut item_inputs_cache: BTreeMap<usize, ComposedInput> = BTreeMap::new();
    for ex in batch {
        let input = compose_request(&ex.request, items, vocab, config.max_seq_len, drop_functionality)?;
        let (vector, trace) = encode_traced(&params.request_encoder, &input);
        let apn_fwd = match (&params.apn, &ex.user) {
            (Some(apn), Some(user)) => {
                let mut history = HistoryEncodings::new(user.history.len().max(1), config.dim);
                let mut history_traces = Vec::with_capacity(user.history.len());
                for &h in &user.history {
                    let hist = log.get(h);
                    let req_input = compose_request(
                        &hist.request,
                        items,
                        vocab,
                        config.max_seq_len,
                        drop_functionality,
                    )?;
                    let ord = items
                        .ordinal_of(&hist.clicked_item_id)
                        .expect("click validated at ingestion");
                    let item_input = item_inputs_cache.entry(ord).or_insert_with(|| {
                        compose_item_input(&items.get(ord).text, vocab, config.max_seq_len)
                            .expect("history item valid")
                    });
                    let (req_vec, req_trace) = encode_traced(&params.request_encoder, &req_input);
                    let (cl_vec, cl_trace) = encode_traced(&params.item_encoder, item_input);
                    history.push(req_vec, cl_vec);
                    history_traces.push((req_trace, cl_trace));
                }
                let (r_star, trace) = if history.valid_rows() == 0 {
                    cold_start_forward(apn, &vector, ex.functionality.id() as usize)
                } else {
                    apn_forward(
                        apn,
                        &vector,
                        &history,
                        user.user_row,
                        ex.functionality.id() as usize,
                    )
                    .map_err(|e| TrainError::Encode(format!("{e}")))?
                };
                Some(ApnForward {
                    r_star,
                    trace,
                    history,
                    history_traces,
                })
            }
            _ => None,
        };
        requests.push(RequestForward {
            vector,
            trace,
            apn: apn_fwd,
        });
    }

    // scores and loss
    let sets: Vec<CandidateSet> = batch
        .iter()
        .zip(&requests)
        .zip(&candidate_items)
        .map(|((_, req), items_k)| {
            let r = req.apn.as_ref().map_or(&req.vector, |a| &a.r_star);
            CandidateSet {
                scores: items_k
                    .iter()
                    .map(|&ord| math::dot(r, final_item(item_slots[&ord])))
                    .collect(),
                items: items_k.clone(),
            }
        })
        .collect();
    let (loss, score_grads) = batch_loss(&sets)?;

    // backward
    let mut grads = ModelGrads::zeros_like(params);
    let mut d_items: Vec<Vec<f64>> = vec![vec![0.0; config.dim]; distinct_items.len()];
    for ((req, items_k), g_k) in requests.iter().zip(&candidate_items).zip(&score_grads) {
        let r = req.apn.as_ref().map_or(&req.vector, |a| &a.r_star);
        let mut d_r = vec![0.0; config.dim];
        for (&ord, &g) in items_k.iter().zip(g_k) {
            if g == 0.0 {
                continue;
            }
            let slot = item_slots[&ord];
            add_scaled(&mut d_r, final_item(slot), g);
            add_scaled(&mut d_items[slot], r, g);
        }
        match &req.apn {
            None => {
                encode_backward(
                    &params.request_encoder,
                    &req.trace,
                    &d_r,
                    &mut grads.request_encoder,
                );
            }
            Some(fwd) => {
                let apn = params.apn.as_ref().unwrap();
                let apn_grads = grads.apn.as_mut().unwrap();
                let input_grads = apn_backward(
                    apn,
                    &fwd.trace,
                    (fwd.history.valid_rows() > 0).then_some(&fwd.history),
                    &d_r,
                    apn_grads,
                );
                encode_backward(
                    &params.request_encoder,
                    &req.trace,
                    &input_grads.request,
                    &mut grads.request_encoder,
                );
                for (row, (req_trace, item_trace)) in fwd.history_traces.iter().enumerate() {
                    encode_backward(
                        &params.request_encoder,
                        req_trace,
                        &input_grads.history_req[row],
                        &mut grads.request_encoder,
                    );
                    encode_backward(
                        &params.item_encoder,
                        item_trace,
                        &input_grads.history_item[row],
                        &mut grads.item_encoder,
                    );
                }
            }
        }
    }
    for (slot, d_final) in d_items.iter().enumerate() {
        let upstream = if personalized {
            let apn = params.apn.as_ref().unwrap();
            let apn_grads = grads.apn.as_mut().unwrap();
            item_adapter_backward(apn, &adapter_traces[slot], d_final, apn_grads)
        } else {
            d_final.clone()
        };
        encode_backward(
            &params.item_encoder,
            &item_traces[slot],
            &upstream,
            &mut grads.item_encoder,
        );
    }
    Ok((loss, grads))
}

/// Statistics of one training epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg: f64,
}

/// A finished training run: the best-epoch model plus per-epoch statistics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Builds non-personalized examples from the training split.
pub fn build_pretrain_examples(
    log: &InteractionLog,
    train: &[usize],
    items: &ItemCollection,
    only: Option<Functionality>,
) -> Vec<TrainingExample> {
    train
        .iter()
        .filter_map(|&idx| {
            let inter = log.get(idx);
            if let Some(f) = only {
                if inter.request.functionality != f {
                    return None;
                }
            }
            Some(TrainingExample {
                interaction: idx,
                functionality: inter.request.functionality,
                request: inter.request.clone(),
                positive: items
                    .ordinal_of(&inter.clicked_item_id)
                    .expect("click validated at ingestion"),
                negatives: Vec::new(),
                user: None,
            })
        })
        .collect()
}

/// Vocabulary over item texts, query texts, and the functionality
/// descriptions.
pub fn build_training_vocabulary(
    items: &ItemCollection,
    log: &InteractionLog,
    min_count: usize,
) -> Vocabulary {
    let descriptors = default_descriptors();
    let mut texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
    for inter in log.iter() {
        if let crate::corpus::RequestPayload::QueryText(q) = &inter.request.payload {
            texts.push(q);
        }
    }
    for d in &descriptors {
        texts.push(&d.description);
    }
    Vocabulary::build(texts, min_count).expect("nonempty corpus")
}

fn mine_all_bm25(
    examples: &mut [TrainingExample],
    lexical: &LexicalIndex,
    items: &ItemCollection,
    positives: &BTreeMap<String, BTreeSet<usize>>,
    config: &TrainConfig,
    rng: &mut Rng,
) {
    for ex in examples.iter_mut() {
        let pos = positives
            .get(&ex.request.key())
            .expect("positives collected over the same split");
        ex.negatives = mine_bm25_negatives(
            lexical,
            items,
            &ex.request,
            pos,
            config.pool_size,
            config.neg_ratio,
            rng,
        );
    }
}

fn validation_ndcg(
    params: &ModelParams,
    vocab: &Vocabulary,
    items: &ItemCollection,
    log: &InteractionLog,
    valid: &[usize],
    personalized: bool,
    user_keys: &[String],
    config: &TrainConfig,
) -> f64 {
    // task-specific runs select their best epoch on their own task
    let valid: Vec<usize> = match config.only_functionality {
        Some(f) => valid
            .iter()
            .copied()
            .filter(|&i| log.get(i).request.functionality == f)
            .collect(),
        None => valid.to_vec(),
    };
    if valid.is_empty() {
        return f64::NAN;
    }
    let bundle = ModelBundle {
        params: params.clone(),
        vocab: vocab.clone(),
        user_keys: user_keys.to_vec(),
    };
    let index = match build_dense_index(&bundle.params, vocab, items, "validation".to_string()) {
        Ok(i) => i,
        Err(_) => return f64::NAN,
    };
    let split = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: valid,
    };
    let eval_cfg = EvalConfig {
        k_retrieve: 10,
        mrr_cutoff: 10,
        ndcg_cutoff: 10,
        recall_cutoff: 10,
        exclude_valid_from_test_history: false,
        history_same_functionality_only: config.history_same_functionality_only,
        drop_functionality: config.drop_functionality,
    };
    let mode = if personalized {
        EvalMode::Personalized
    } else {
        EvalMode::NonPersonalized
    };
    match evaluate(&bundle, items, log, &split, &index, "validation", mode, &eval_cfg) {
        Ok(report) => {
            let mut sum = 0.0;
            for o in &report.outcomes {
                sum += o.ndcg;
            }
            sum / report.outcomes.len() as f64
        }
        Err(_) => f64::NAN,
    }
}

/// Shared epoch loop. `mine` fills each example's negatives for the epoch.
#[allow(clippy::too_many_arguments)]
fn run_epochs<M>(
    mut params: ModelParams,
    vocab: &Vocabulary,
    items: &ItemCollection,
    log: &InteractionLog,
    valid: &[usize],
    mut examples: Vec<TrainingExample>,
    epochs: usize,
    lr: f64,
    personalized: bool,
    user_keys: &[String],
    config: &TrainConfig,
    rng: &mut Rng,
    mut mine: M,
) -> Result<TrainOutcome, TrainError>
where
    M: FnMut(&mut [TrainingExample], &ModelParams, &mut Rng) -> Result<(), TrainError>,
{
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..epochs {
        let mut epoch_rng = rng.fork(epoch as u64 + 1);
        mine(&mut examples, &params, &mut epoch_rng)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut cursor = 0;
        while cursor < order.len() {
            let end = (cursor + config.batch_size).min(order.len());
            if end - cursor < 2 {
                break; // a trailing singleton cannot form in-batch negatives
            }
            let batch: Vec<TrainingExample> = order[cursor..end]
                .iter()
                .map(|&i| examples[i].clone())
                .collect();
            let (loss, mut grads) =
                batch_step(&params, vocab, items, log, &batch, config.drop_functionality)?;
            if config.freeze_collaborative {
                if let Some(apn) = grads.apn.as_mut() {
                    apn.user_embedding.data_mut().fill(0.0);
                    apn.functionality_embedding.data_mut().fill(0.0);
                }
            }
            if config.drop_functionality {
                if let Some(apn) = grads.apn.as_mut() {
                    apn.functionality_embedding.data_mut().fill(0.0);
                }
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
            loss_sum += loss;
            steps += 1;
            cursor = end;
        }

        let valid_ndcg =
            validation_ndcg(&params, vocab, items, log, valid, personalized, user_keys, config);
        history.push(EpochStats {
            epoch,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            valid_ndcg,
        });
        let better = match &best {
            None => true,
            Some((best_ndcg, _, _)) => valid_ndcg.is_finite() && valid_ndcg > *best_ndcg,
        };
        if better {
            best = Some((valid_ndcg, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) =
        best.unwrap_or((f64::NAN, epochs.saturating_sub(1), params));
    Ok(TrainOutcome {
        bundle: ModelBundle {
            params: best_params,
            vocab: vocab.clone(),
            user_keys: user_keys.to_vec(),
        },
        history,
        best_epoch,
    })
}

/// Phase-1 pre-training: fresh encoders, lexical hard negatives plus
/// in-batch negatives, non-personalized dot-product scoring.
pub fn pretrain_stage1(
    model_config: ModelConfig,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    lexical: &LexicalIndex,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let vocab = build_training_vocabulary(items, log, model_config.min_term_count);
    let mut rng = Rng::new(config.seed);
    let params = ModelParams::init(model_config, vocab.len(), &mut rng.fork(0));
    let examples = build_pretrain_examples(log, &split.train, items, config.only_functionality);
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let positives = collect_positives(log, &split.train, items);
    let lr = config.lr_pretrain;
    run_epochs(
        params,
        &vocab,
        items,
        log,
        &split.valid,
        examples,
        config.epochs_pretrain1,
        lr,
        false,
        &[],
        config,
        &mut rng,
        |examples, _, rng| {
            mine_all_bm25(examples, lexical, items, &positives, config, rng);
            Ok(())
        },
    )
}

/// Phase-2 pre-training: continues from the phase-1 model, mining negatives
/// from the dense index built from that same checkpoint (tag-checked).
pub fn pretrain_stage2(
    phase1: &ModelBundle,
    phase1_tag: &str,
    dense: &DenseIndex,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if phase1_tag.is_empty() {
        return Err(TrainError::MissingStageTag);
    }
    check_provenance(dense, phase1_tag).map_err(|e| TrainError::StaleIndex(format!("{e}")))?;

    let vocab = phase1.vocab.clone();
    let mut rng = Rng::new(config.seed ^ 0x5747_4532); // distinct stream per stage
    let params = if config.reinit_before_stage2 {
        ModelParams::init(phase1.params.config, vocab.len(), &mut rng.fork(0))
    } else {
        phase1.params.clone()
    };
    let examples = build_pretrain_examples(log, &split.train, items, config.only_functionality);
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let positives = collect_positives(log, &split.train, items);
    let lr = config.lr_pretrain;
    let drop_f = config.drop_functionality;
    let max_len = phase1.params.config.max_seq_len;
    run_epochs(
        params,
        &vocab,
        items,
        log,
        &split.valid,
        examples,
        config.epochs_pretrain2,
        lr,
        false,
        &[],
        config,
        &mut rng,
        |examples, current, rng| {
            // request vectors from the current encoder, pool from the fixed
            // phase-1 item index
            for ex in examples.iter_mut() {
                let input = compose_request(&ex.request, items, &vocab, max_len, drop_f)?;
                let request_vec = crate::encoder::encode(&current.request_encoder, &input);
                let pos = positives
                    .get(&ex.request.key())
                    .expect("positives collected over the same split");
                ex.negatives = mine_self_negatives(
                    dense,
                    phase1_tag,
                    &request_vec,
                    items.len(),
                    pos,
                    config.pool_size,
                    config.neg_ratio,
                    rng,
                )?;
            }
            Ok(())
        },
    )
}

/// Builds personalized examples for eligible users and the user-row table.
pub fn build_finetune_examples(
    log: &InteractionLog,
    split: &DatasetSplit,
    items: &ItemCollection,
    config: &TrainConfig,
    history_len: usize,
) -> (Vec<TrainingExample>, Vec<String>) {
    let eligible = filter_users_for_finetune(log, config.thresholds);
    let mut slots: BTreeSet<usize> = BTreeSet::new();
    for set in eligible.values() {
        slots.extend(set.iter().copied());
    }
    let user_keys: Vec<String> = slots
        .iter()
        .filter_map(|&slot| log.user_key(slot).clone())
        .collect();
    let row_of: BTreeMap<&str, usize> = user_keys
        .iter()
        .enumerate()
        .map(|(row, key)| (key.as_str(), row))
        .collect();

    let mut examples = Vec::new();
    for &idx in &split.train {
        let inter = log.get(idx);
        if let Some(f) = config.only_functionality {
            if inter.request.functionality != f {
                continue;
            }
        }
        let Some(user_id) = &inter.user_id else {
            continue;
        };
        let Some(slot) = log.user_slot(&inter.user_id) else {
            continue;
        };
        if !eligible[&inter.request.functionality].contains(&slot) {
            continue;
        }
        let only = config
            .history_same_functionality_only
            .then_some(inter.request.functionality);
        let history = log.select_history(&inter.user_id, inter.timestamp, history_len, only);
        examples.push(TrainingExample {
            interaction: idx,
            functionality: inter.request.functionality,
            request: inter.request.clone(),
            positive: items
                .ordinal_of(&inter.clicked_item_id)
                .expect("click validated at ingestion"),
            negatives: Vec::new(),
            user: Some(UserContext {
                user_row: row_of[user_id.as_str()],
                history,
            }),
        });
    }
    (examples, user_keys)
}

/// Personalized fine-tuning: attaches the personalization network and
/// trains everything end-to-end with lexical plus in-batch negatives.
pub fn finetune_personalized(
    pretrained: &ModelBundle,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    lexical: &LexicalIndex,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let vocab = pretrained.vocab.clone();
    let (examples, user_keys) = build_finetune_examples(
        log,
        split,
        items,
        config,
        pretrained.params.config.history_len,
    );
    if user_keys.is_empty() {
        return Err(TrainError::NoEligibleUsers);
    }
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }

    let mut rng = Rng::new(config.seed ^ 0x4649_4e45);
    let mut params = pretrained.params.clone();
    params.attach_apn(user_keys.len(), &mut rng.fork(0));
    if config.freeze_collaborative {
        let apn = params.apn.as_mut().unwrap();
        apn.user_embedding.data_mut().fill(0.0);
        apn.functionality_embedding.data_mut().fill(0.0);
    }
    if config.drop_functionality {
        // without F in scope the functionality embedding must stay silent too
        let apn = params.apn.as_mut().unwrap();
        apn.functionality_embedding.data_mut().fill(0.0);
    }

    let positives = collect_positives(log, &split.train, items);
    let lr = config.lr_finetune;
    run_epochs(
        params,
        &vocab,
        items,
        log,
        &split.valid,
        examples,
        config.epochs_finetune,
        lr,
        true,
        &user_keys,
        config,
        &mut rng,
        |examples, _, rng| {
            mine_all_bm25(examples, lexical, items, &positives, config, rng);
            Ok(())
        },
    )
}

/// Artifacts of a full training pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
    pub finetuned: Option<TrainOutcome>,
    /// Checkpoint hash of the final model.
    pub final_tag: String,
    /// Dense index over the final model's item vectors (adapter applied
    /// when the model is personalized).
    pub final_index: DenseIndex,
}

impl PipelineOutcome {
    pub fn final_bundle(&self) -> &ModelBundle {
        self.finetuned
            .as_ref()
            .map(|t| &t.bundle)
            .unwrap_or(&self.stage2.bundle)
    }
}

/// Runs the whole training pipeline: phase-1 pre-training, dense index,
/// phase-2 pre-training with self negatives, then optionally personalized
/// fine-tuning, ending with a provenance-tagged index over the final model.
pub fn run_full_pipeline(
    model_config: ModelConfig,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    lexical: &LexicalIndex,
    config: &TrainConfig,
    personalize: bool,
) -> Result<PipelineOutcome, TrainError> {
    let stage1 = pretrain_stage1(model_config, items, log, split, lexical, config)?;
    let tag1 = stage1.bundle.to_checkpoint("pretrain1").hash_tag();
    let index1 = build_dense_index(&stage1.bundle.params, &stage1.bundle.vocab, items, tag1.clone())
        .map_err(|e| TrainError::Encode(format!("{e}")))?;
    let stage2 = pretrain_stage2(&stage1.bundle, &tag1, &index1, items, log, split, config)?;

    let finetuned = if personalize {
        Some(finetune_personalized(
            &stage2.bundle,
            items,
            log,
            split,
            lexical,
            config,
        )?)
    } else {
        None
    };

    let final_bundle = finetuned.as_ref().map(|t| &t.bundle).unwrap_or(&stage2.bundle);
    let stage_name = if personalize { "finetune" } else { "pretrain2" };
    let final_tag = final_bundle.to_checkpoint(stage_name).hash_tag();
    let final_index = build_dense_index(
        &final_bundle.params,
        &final_bundle.vocab,
        items,
        final_tag.clone(),
    )
    .map_err(|e| TrainError::Encode(format!("{e}")))?;

    Ok(PipelineOutcome {
        stage1,
        stage2,
        finetuned,
        final_tag,
        final_index,
    })
}

/// Relative-error report of analytic gradients against central finite
/// differences of the full personalized loss, per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(group name, max relative error)` for every parameter group.
    pub groups: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn within(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric));
    if denom < 1e-7 {
        0.0
    } else {
        math::abs(analytic - numeric) / denom
    }
}

/// Verifies the hand-written backward pass of the complete personalized
/// cross-entropy loss (encoders, attention heads, layer norm, embeddings,
/// fusion, adapter) with central finite differences at tiny dimensions.
pub fn gradient_check(seed: u64, step: f64) -> Result<GradCheckReport, TrainError> {
    use crate::corpus::{Interaction, Item, RequestPayload};

    let model_config = ModelConfig {
        embed_dim: 4,
        dim: 4,
        num_heads: 2,
        key_dim: 2,
        value_dim: 2,
        user_dim: 3,
        func_dim: 2,
        history_len: 2,
        max_seq_len: 16,
        min_term_count: 1,
    };
    let items = ItemCollection::from_items(
        (0..6)
            .map(|i| Item {
                item_id: format!("i{i}"),
                text: format!("tok{} tok{} shared", i, (i + 1) % 6),
            })
            .collect(),
    )
    .expect("tiny catalog");
    let mk = |user: &str, ts: u64, f: Functionality, payload: RequestPayload, click: &str| {
        Interaction {
            user_id: Some(user.to_string()),
            timestamp: ts,
            request: Request {
                functionality: f,
                payload,
            },
            clicked_item_id: click.to_string(),
        }
    };
    let raw = vec![
        mk("ua", 1, Functionality::KeywordSearch, RequestPayload::QueryText("tok0 shared".into()), "i0"),
        mk("ua", 2, Functionality::QueryByExample, RequestPayload::AnchorItem("i0".into()), "i1"),
        mk("ua", 3, Functionality::ComplementaryRec, RequestPayload::AnchorItem("i1".into()), "i2"),
        mk("ub", 1, Functionality::KeywordSearch, RequestPayload::QueryText("tok3".into()), "i3"),
        mk("ub", 2, Functionality::QueryByExample, RequestPayload::AnchorItem("i3".into()), "i4"),
        mk("ub", 3, Functionality::KeywordSearch, RequestPayload::QueryText("tok4 tok5".into()), "i5"),
    ];
    let log = InteractionLog::from_interactions(raw, &items).expect("tiny log");
    let vocab = build_training_vocabulary(&items, &log, 1);

    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(model_config, vocab.len(), &mut rng);
    params.attach_apn(2, &mut rng);

    // two personalized examples with history and one mined negative each
    let batch = vec![
        TrainingExample {
            interaction: 2,
            functionality: Functionality::ComplementaryRec,
            request: log.get(2).request.clone(),
            positive: 2,
            negatives: vec![4],
            user: Some(UserContext {
                user_row: 0,
                history: vec![0, 1],
            }),
        },
        TrainingExample {
            interaction: 5,
            functionality: Functionality::KeywordSearch,
            request: log.get(5).request.clone(),
            positive: 5,
            negatives: vec![0],
            user: Some(UserContext {
                user_row: 1,
                history: vec![3, 4],
            }),
        },
    ];

    let loss_of = |p: &ModelParams| -> f64 {
        let sets = forward_candidates(p, &vocab, &items, &log, &batch).expect("forward");
        batch_loss(&sets).expect("loss").0
    };

    let (_, grads) = batch_step(&params, &vocab, &items, &log, &batch, false)?;

    let grad_tensors = grads.named_tensors();
    let mut groups = Vec::with_capacity(grad_tensors.len());
    let analytic: Vec<(String, Vec<f64>)> = grad_tensors
        .iter()
        .map(|(n, g)| (n.clone(), g.to_vec()))
        .collect();
    for (name, analytic_grad) in &analytic {
        let mut max_err = 0.0f64;
        for i in 0..analytic_grad.len() {
            let original = {
                let mut tensors = params.named_tensors_mut();
                let (_, t) = tensors
                    .iter_mut()
                    .find(|(n, _)| n == name)
                    .expect("tensor exists");
                let orig = t[i];
                t[i] = orig + step;
                orig
            };
            let up = loss_of(&params);
            {
                let mut tensors = params.named_tensors_mut();
                let (_, t) = tensors.iter_mut().find(|(n, _)| n == name).unwrap();
                t[i] = original - step;
            }
            let down = loss_of(&params);
            {
                let mut tensors = params.named_tensors_mut();
                let (_, t) = tensors.iter_mut().find(|(n, _)| n == name).unwrap();
                t[i] = original;
            }
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_error(analytic_grad[i], numeric));
        }
        groups.push((name.clone(), max_err));
    }
    Ok(GradCheckReport { groups })
}

/// Forward pass producing candidate sets without gradients; shared by the
/// finite-difference oracle so the loss is a pure function of parameters.
pub fn forward_candidates(
    params: &ModelParams,
    vocab: &Vocabulary,
    items: &ItemCollection,
    log: &InteractionLog,
    batch: &[TrainingExample],
) -> Result<Vec<CandidateSet>, TrainError> {
    let config = &params.config;
    let candidate_items = build_candidate_items(batch);
    let mut sets = Vec::with_capacity(batch.len());
    for (ex, items_k) in batch.iter().zip(&candidate_items) {
        let input = compose_request(&ex.request, items, vocab, config.max_seq_len, false)?;
        let (req_vec, _) = encode_traced(&params.request_encoder, &input);
        let r_final = match (&params.apn, &ex.user) {
            (Some(apn), Some(user)) => {
                let mut history = HistoryEncodings::new(user.history.len().max(1), config.dim);
                for &h in &user.history {
                    let hist = log.get(h);
                    let req_input =
                        compose_request(&hist.request, items, vocab, config.max_seq_len, false)?;
                    let ord = items.ordinal_of(&hist.clicked_item_id).unwrap();
                    let item_input =
                        compose_item_input(&items.get(ord).text, vocab, config.max_seq_len)
                            .map_err(|e| TrainError::Encode(format!("{e}")))?;
                    history.push(
                        crate::encoder::encode(&params.request_encoder, &req_input),
                        crate::encoder::encode(&params.item_encoder, &item_input),
                    );
                }
                if history.valid_rows() == 0 {
                    cold_start_forward(apn, &req_vec, ex.functionality.id() as usize).0
                } else {
                    apn_forward(
                        apn,
                        &req_vec,
                        &history,
                        user.user_row,
                        ex.functionality.id() as usize,
                    )
                    .map_err(|e| TrainError::Encode(format!("{e}")))?
                    .0
                }
            }
            _ => req_vec,
        };
        let scores = items_k
            .iter()
            .map(|&ord| {
                let input = compose_item_input(&items.get(ord).text, vocab, config.max_seq_len)
                    .expect("item text valid");
                let mut v = crate::encoder::encode(&params.item_encoder, &input);
                if let Some(apn) = &params.apn {
                    v = crate::apn::item_adapter(apn, &v);
                }
                math::dot(&r_final, &v)
            })
            .collect();
        sets.push(CandidateSet {
            items: items_k.clone(),
            scores,
        });
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainError {
    BatchTooSmall(usize),
    PoolSmallerThanRatio { pool: usize, ratio: usize },
    EmptyBatch,
    EmptyTrainSet,
    NoEligibleUsers,
    MissingStageTag,
    StaleIndex(String),
    NonFiniteGradient { name: String, step: u64 },
    Encode(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BatchTooSmall(b) => {
                write!(f, "batch size {b} too small; in-batch negatives need at least 2")
            }
            TrainError::PoolSmallerThanRatio { pool, ratio } => {
                write!(f, "mining pool {pool} smaller than negative ratio {ratio}")
            }
            TrainError::EmptyBatch => write!(f, "empty batch"),
            TrainError::EmptyTrainSet => write!(f, "no training examples"),
            TrainError::NoEligibleUsers => {
                write!(f, "no users meet the fine-tuning interaction thresholds")
            }
            TrainError::MissingStageTag => {
                write!(f, "phase 2 requires the phase-1 checkpoint tag")
            }
            TrainError::StaleIndex(msg) => write!(f, "{msg}"),
            TrainError::NonFiniteGradient { name, step } => {
                write!(f, "non-finite gradient in {name} at step {step}")
            }
            TrainError::Encode(msg) => write!(f, "encoding failed: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}
