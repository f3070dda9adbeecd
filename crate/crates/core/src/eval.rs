//! Ranking metrics, the leave-last-out evaluation protocol, paired
//! significance testing, and per-user comparison reports.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::apn::{apn_forward, cold_start_forward, HistoryEncodings};
use crate::corpus::{
    default_descriptors, DatasetSplit, Functionality, InteractionLog, ItemCollection,
};
use crate::encoder::{
    compose_item_input, compose_request_input, compose_request_input_no_functionality, encode,
};
use crate::index::{check_provenance, DenseIndex};
use crate::math;
use crate::model::ModelBundle;

/// Reciprocal rank of the first relevant item within the cutoff, else 0.
pub fn mrr_at(ranked: &[usize], relevant: &BTreeSet<usize>, cutoff: usize) -> f64 {
    assert!(cutoff >= 1);
    for (pos, item) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(item) {
            return 1.0 / (pos + 1) as f64;
        }
    }
    0.0
}

/// Binary-gain NDCG at the cutoff: hits contribute `1/log2(rank+1)`,
/// normalized by the ideal ordering of the relevant set.
pub fn ndcg_at(ranked: &[usize], relevant: &BTreeSet<usize>, cutoff: usize) -> f64 {
    assert!(cutoff >= 1);
    if relevant.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / math::log2((pos + 2) as f64);
        }
    }
    let ideal_hits = relevant.len().min(cutoff);
    let mut ideal = 0.0;
    for pos in 0..ideal_hits {
        ideal += 1.0 / math::log2((pos + 2) as f64);
    }
    dcg / ideal
}

/// Fraction of the relevant set retrieved within the cutoff.
pub fn recall_at(
    ranked: &[usize],
    relevant: &BTreeSet<usize>,
    cutoff: usize,
) -> Result<f64, EvalError> {
    assert!(cutoff >= 1);
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevantSet);
    }
    let hits = ranked
        .iter()
        .take(cutoff)
        .filter(|i| relevant.contains(i))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Scoring path used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Request vectors pass through the personalization network.
    Personalized,
    /// Plain bi-encoder scores.
    NonPersonalized,
}

/// Knobs for the evaluation protocol; cutoffs default to MRR@10, NDCG@10,
/// Recall@50 with a 100-item retrieval pool.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub k_retrieve: usize,
    pub mrr_cutoff: usize,
    pub ndcg_cutoff: usize,
    pub recall_cutoff: usize,
    /// Drop the validation interaction from test-time history windows.
    pub exclude_valid_from_test_history: bool,
    /// Restrict history windows to the request's own functionality.
    pub history_same_functionality_only: bool,
    /// Compose request inputs without the functionality description.
    pub drop_functionality: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_retrieve: 100,
            mrr_cutoff: 10,
            ndcg_cutoff: 10,
            recall_cutoff: 50,
            exclude_valid_from_test_history: false,
            history_same_functionality_only: false,
            drop_functionality: false,
        }
    }
}

/// Metrics of a single evaluated test request.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub interaction: usize,
    pub functionality: Functionality,
    pub user: Option<String>,
    pub mrr: f64,
    pub ndcg: f64,
    pub recall: f64,
}

/// Aggregate metrics of one functionality.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FunctionalitySummary {
    pub mrr: f64,
    pub ndcg: f64,
    pub recall: f64,
    pub query_count: usize,
}

/// Evaluation result: per-query outcomes plus per-functionality means.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub outcomes: Vec<QueryOutcome>,
    pub per_functionality: BTreeMap<Functionality, FunctionalitySummary>,
}

impl MetricReport {
    fn from_outcomes(outcomes: Vec<QueryOutcome>) -> Self {
        let mut per_functionality: BTreeMap<Functionality, FunctionalitySummary> = BTreeMap::new();
        for o in &outcomes {
            let s = per_functionality.entry(o.functionality).or_default();
            s.mrr += o.mrr;
            s.ndcg += o.ndcg;
            s.recall += o.recall;
            s.query_count += 1;
        }
        for s in per_functionality.values_mut() {
            if s.query_count > 0 {
                let n = s.query_count as f64;
                s.mrr /= n;
                s.ndcg /= n;
                s.recall /= n;
            }
        }
        MetricReport {
            outcomes,
            per_functionality,
        }
    }

    pub fn summary(&self, f: Functionality) -> FunctionalitySummary {
        self.per_functionality.get(&f).copied().unwrap_or_default()
    }

    /// Mean NDCG per user over this report's outcomes.
    pub fn per_user_ndcg(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for o in &self.outcomes {
            if let Some(user) = &o.user {
                let e = sums.entry(user.clone()).or_insert((0.0, 0));
                e.0 += o.ndcg;
                e.1 += 1;
            }
        }
        sums.into_iter()
            .map(|(u, (sum, n))| (u, sum / n as f64))
            .collect()
    }

    /// Per-query NDCG aligned by interaction index, for paired testing.
    pub fn ndcg_by_interaction(&self) -> BTreeMap<usize, f64> {
        self.outcomes
            .iter()
            .map(|o| (o.interaction, o.ndcg))
            .collect()
    }
}

/// Builds the evaluation-time request vector for one logged interaction.
pub fn eval_request_vector(
    bundle: &ModelBundle,
    items: &ItemCollection,
    log: &InteractionLog,
    interaction: usize,
    mode: EvalMode,
    cfg: &EvalConfig,
    exclude_from_history: &BTreeSet<usize>,
) -> Result<Vec<f64>, EvalError> {
    let inter = log.get(interaction);
    request_vector(
        bundle,
        items,
        log,
        &inter.request,
        &inter.user_id,
        inter.timestamp,
        mode,
        cfg,
        exclude_from_history,
    )
}

/// Builds a request vector for an arbitrary request at time `t`, using the
/// user's history strictly before `t`. Users outside the embedding table or
/// with no usable history route through the cold-start path.
#[allow(clippy::too_many_arguments)]
pub fn request_vector(
    bundle: &ModelBundle,
    items: &ItemCollection,
    log: &InteractionLog,
    request: &crate::corpus::Request,
    user: &Option<String>,
    t: u64,
    mode: EvalMode,
    cfg: &EvalConfig,
    exclude_from_history: &BTreeSet<usize>,
) -> Result<Vec<f64>, EvalError> {
    let descriptors = default_descriptors();
    let config = &bundle.params.config;
    let input = if cfg.drop_functionality {
        compose_request_input_no_functionality(request, items, &bundle.vocab, config.max_seq_len)
    } else {
        compose_request_input(
            request,
            &descriptors[request.functionality.id() as usize],
            items,
            &bundle.vocab,
            config.max_seq_len,
        )
    }
    .map_err(|e| EvalError::Encode(alloc::format!("{e}")))?;
    let request_vec = encode(&bundle.params.request_encoder, &input);

    match mode {
        EvalMode::NonPersonalized => Ok(request_vec),
        EvalMode::Personalized => {
            let apn = bundle
                .params
                .apn
                .as_ref()
                .ok_or(EvalError::MissingPersonalization)?;
            let only = cfg
                .history_same_functionality_only
                .then_some(request.functionality);
            let history_idx: Vec<usize> = log
                .select_history(user, t, config.history_len, only)
                .into_iter()
                .filter(|i| !exclude_from_history.contains(i))
                .collect();
            let user_row = bundle.user_row(user);
            if history_idx.is_empty() || user_row.is_none() {
                let (r_star, _) =
                    cold_start_forward(apn, &request_vec, request.functionality.id() as usize);
                return Ok(r_star);
            }
            let mut history = HistoryEncodings::new(history_idx.len(), config.dim);
            for &h in &history_idx {
                let hist = log.get(h);
                let req_input = if cfg.drop_functionality {
                    compose_request_input_no_functionality(
                        &hist.request,
                        items,
                        &bundle.vocab,
                        config.max_seq_len,
                    )
                } else {
                    compose_request_input(
                        &hist.request,
                        &descriptors[hist.request.functionality.id() as usize],
                        items,
                        &bundle.vocab,
                        config.max_seq_len,
                    )
                }
                .map_err(|e| EvalError::Encode(alloc::format!("{e}")))?;
                let item_ord = items
                    .ordinal_of(&hist.clicked_item_id)
                    .expect("click validated at ingestion");
                let item_input =
                    compose_item_input(&items.get(item_ord).text, &bundle.vocab, config.max_seq_len)
                        .map_err(|e| EvalError::Encode(alloc::format!("{e}")))?;
                history.push(
                    encode(&bundle.params.request_encoder, &req_input),
                    encode(&bundle.params.item_encoder, &item_input),
                );
            }
            let (r_star, _) = apn_forward(
                apn,
                &request_vec,
                &history,
                user_row.unwrap(),
                request.functionality.id() as usize,
            )
            .map_err(|e| EvalError::Encode(alloc::format!("{e}")))?;
            Ok(r_star)
        }
    }
}

/// Leave-last-out evaluation over the test split: retrieve `k_retrieve`
/// items per test request and score against the held-out click.
pub fn evaluate(
    bundle: &ModelBundle,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    index: &DenseIndex,
    checkpoint_tag: &str,
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    check_provenance(index, checkpoint_tag).map_err(|e| EvalError::Provenance(alloc::format!("{e}")))?;
    if split.test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let exclude: BTreeSet<usize> = if cfg.exclude_valid_from_test_history {
        split.valid.iter().copied().collect()
    } else {
        BTreeSet::new()
    };

    let mut outcomes = Vec::with_capacity(split.test.len());
    for &t in &split.test {
        let inter = log.get(t);
        let request_vec =
            eval_request_vector(bundle, items, log, t, mode, cfg, &exclude)?;
        let hits = index
            .exact_topk(&request_vec, cfg.k_retrieve)
            .map_err(|e| EvalError::Provenance(alloc::format!("{e}")))?;
        let ranked: Vec<usize> = hits.iter().map(|&(ord, _)| ord).collect();
        let clicked = items
            .ordinal_of(&inter.clicked_item_id)
            .expect("click validated at ingestion");
        let relevant: BTreeSet<usize> = [clicked].into_iter().collect();
        outcomes.push(QueryOutcome {
            interaction: t,
            functionality: inter.request.functionality,
            user: inter.user_id.clone(),
            mrr: mrr_at(&ranked, &relevant, cfg.mrr_cutoff),
            ndcg: ndcg_at(&ranked, &relevant, cfg.ndcg_cutoff),
            recall: recall_at(&ranked, &relevant, cfg.recall_cutoff)?,
        });
    }
    Ok(MetricReport::from_outcomes(outcomes))
}

/// Result of a two-tailed paired t-test with Bonferroni adjustment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TTestResult {
    /// All paired differences are exactly zero.
    NoDifference,
    Computed {
        t: f64,
        p: f64,
        /// `min(1, p * num_comparisons)`.
        p_adjusted: f64,
    },
}

/// Two-tailed paired t-test over per-query metric vectors.
pub fn paired_t_test(a: &[f64], b: &[f64], num_comparisons: usize) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewPairs(a.len()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTestResult::NoDifference);
    }
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if var == 0.0 {
        // identical nonzero shifts: unbounded t, p collapses to zero
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TTestResult::Computed {
            t,
            p: 0.0,
            p_adjusted: 0.0,
        });
    }
    let t = mean / math::sqrt(var / n);
    let p = student_t_two_tailed(t, df);
    let p_adjusted = (p * num_comparisons as f64).min(1.0);
    Ok(TTestResult::Computed { t, p, p_adjusted })
}

/// Two-tailed p-value from the t distribution via the regularized
/// incomplete beta function: `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Lanczos approximation of `ln(Gamma(x))` for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * math::ln(tmp);
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + math::ln(2.5066282746310005 * ser / x)
}

/// Regularized incomplete beta `I_x(a, b)` via continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        math::exp(ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * math::ln(x) + b * math::ln(1.0 - x));
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 3e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if math::abs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if math::abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if math::abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if math::abs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if math::abs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if math::abs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

/// Per-user NDCG difference table between two reports, sorted descending.
#[derive(Debug, Clone)]
pub struct UserDeltaReport {
    /// `(user, ndcg_a - ndcg_b)` sorted by descending delta then user key.
    pub rows: Vec<(String, f64)>,
    pub fraction_positive: f64,
    pub fraction_zero: f64,
    pub fraction_negative: f64,
}

pub fn per_user_delta_report(a: &MetricReport, b: &MetricReport) -> UserDeltaReport {
    let ndcg_a = a.per_user_ndcg();
    let ndcg_b = b.per_user_ndcg();
    let users: BTreeSet<&String> = ndcg_a.keys().chain(ndcg_b.keys()).collect();
    let mut rows: Vec<(String, f64)> = users
        .into_iter()
        .map(|u| {
            let va = ndcg_a.get(u).copied().unwrap_or(0.0);
            let vb = ndcg_b.get(u).copied().unwrap_or(0.0);
            (u.clone(), va - vb)
        })
        .collect();
    rows.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let n = rows.len().max(1) as f64;
    let pos = rows.iter().filter(|(_, d)| *d > 0.0).count() as f64 / n;
    let zero = rows.iter().filter(|(_, d)| *d == 0.0).count() as f64 / n;
    let neg = rows.iter().filter(|(_, d)| *d < 0.0).count() as f64 / n;
    UserDeltaReport {
        rows,
        fraction_positive: pos,
        fraction_zero: zero,
        fraction_negative: neg,
    }
}

/// The runnable ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Drop the functionality description from request composition.
    NoFunctionality,
    /// Train on a single functionality's data only.
    TaskSpecific(Functionality),
    /// Skip personalization entirely; score with plain encoder vectors.
    NoApn,
    /// Restrict history windows to the request's own functionality.
    PerFunctionalityHistory,
    /// Zero and freeze the collaborative user/functionality embeddings.
    NoCollaborative,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "no_f" => Some(AblationVariant::NoFunctionality),
            "task_specific_search" => {
                Some(AblationVariant::TaskSpecific(Functionality::KeywordSearch))
            }
            "task_specific_qbe" => {
                Some(AblationVariant::TaskSpecific(Functionality::QueryByExample))
            }
            "task_specific_cir" => {
                Some(AblationVariant::TaskSpecific(Functionality::ComplementaryRec))
            }
            "no_apn" => Some(AblationVariant::NoApn),
            "per_functionality_history" => Some(AblationVariant::PerFunctionalityHistory),
            "no_collab" => Some(AblationVariant::NoCollaborative),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::NoFunctionality => "no_f",
            AblationVariant::TaskSpecific(Functionality::KeywordSearch) => "task_specific_search",
            AblationVariant::TaskSpecific(Functionality::QueryByExample) => "task_specific_qbe",
            AblationVariant::TaskSpecific(Functionality::ComplementaryRec) => "task_specific_cir",
            AblationVariant::NoApn => "no_apn",
            AblationVariant::PerFunctionalityHistory => "per_functionality_history",
            AblationVariant::NoCollaborative => "no_collab",
        }
    }
}

/// A trained-and-evaluated configuration.
pub struct AblationRun {
    pub pipeline: crate::training::PipelineOutcome,
    pub report: MetricReport,
    pub mode: EvalMode,
    pub eval_config: EvalConfig,
}

/// Trains and evaluates one degraded configuration of the model.
pub fn run_ablation(
    variant: AblationVariant,
    model_config: crate::model::ModelConfig,
    items: &ItemCollection,
    log: &InteractionLog,
    split: &DatasetSplit,
    lexical: &crate::lexical::LexicalIndex,
    base_config: &crate::training::TrainConfig,
) -> Result<AblationRun, EvalError> {
    let mut train_config = *base_config;
    let mut eval_config = EvalConfig::default();
    let mut mode = EvalMode::Personalized;
    let mut personalize = true;
    match variant {
        AblationVariant::NoFunctionality => {
            train_config.drop_functionality = true;
            eval_config.drop_functionality = true;
        }
        AblationVariant::TaskSpecific(f) => {
            train_config.only_functionality = Some(f);
        }
        AblationVariant::NoApn => {
            personalize = false;
            mode = EvalMode::NonPersonalized;
        }
        AblationVariant::PerFunctionalityHistory => {
            train_config.history_same_functionality_only = true;
            eval_config.history_same_functionality_only = true;
        }
        AblationVariant::NoCollaborative => {
            train_config.freeze_collaborative = true;
        }
    }
    let pipeline = crate::training::run_full_pipeline(
        model_config,
        items,
        log,
        split,
        lexical,
        &train_config,
        personalize,
    )
    .map_err(|e| EvalError::Encode(alloc::format!("{e}")))?;
    let report = evaluate(
        pipeline.final_bundle(),
        items,
        log,
        split,
        &pipeline.final_index,
        &pipeline.final_tag,
        mode,
        &eval_config,
    )?;
    Ok(AblationRun {
        pipeline,
        report,
        mode,
        eval_config,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalError {
    EmptyRelevantSet,
    EmptyTestSplit,
    MissingPersonalization,
    LengthMismatch { left: usize, right: usize },
    TooFewPairs(usize),
    Encode(String),
    Provenance(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyRelevantSet => write!(f, "recall requires a nonempty relevant set"),
            EvalError::EmptyTestSplit => write!(f, "test split is empty"),
            EvalError::MissingPersonalization => {
                write!(f, "personalized evaluation requires a fine-tuned checkpoint")
            }
            EvalError::LengthMismatch { left, right } => {
                write!(f, "paired vectors differ in length: {left} vs {right}")
            }
            EvalError::TooFewPairs(n) => write!(f, "paired t-test needs at least 2 pairs, got {n}"),
            EvalError::Encode(msg) => write!(f, "encoding failed: {msg}"),
            EvalError::Provenance(msg) => write!(f, "{msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn relevant(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn mrr_basics() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(mrr_at(&ranked, &relevant(&[0]), 10), 1.0);
        assert_eq!(mrr_at(&ranked, &relevant(&[3]), 10), 0.25);
        assert_eq!(mrr_at(&ranked, &relevant(&[10]), 10), 0.0); // rank 11
    }

    #[test]
    fn ndcg_basics() {
        let ranked: Vec<usize> = (0..20).collect();
        assert_eq!(ndcg_at(&ranked, &relevant(&[0]), 10), 1.0);
        // single relevant at rank 3: 1/log2(4) = 0.5
        assert_eq!(ndcg_at(&ranked, &relevant(&[2]), 10), 0.5);
        assert_eq!(ndcg_at(&ranked, &relevant(&[15]), 10), 0.0);
    }

    #[test]
    fn recall_basics() {
        let ranked: Vec<usize> = (0..60).collect();
        assert_eq!(recall_at(&ranked, &relevant(&[1, 2]), 50).unwrap(), 1.0);
        assert_eq!(recall_at(&ranked, &relevant(&[1, 99]), 50).unwrap(), 0.5);
        assert_eq!(recall_at(&ranked, &relevant(&[99, 98]), 50).unwrap(), 0.0);
        assert_eq!(
            recall_at(&ranked, &relevant(&[]), 50).unwrap_err(),
            EvalError::EmptyRelevantSet
        );
    }

    #[test]
    fn metrics_match_naive_reference_on_random_rankings() {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let n = 1 + rng.next_below(60);
            let mut ranked: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut ranked);
            let rel: BTreeSet<usize> = (0..n).filter(|_| rng.next_f64() < 0.2).collect();

            // naive loops over the full ranking
            let mut naive_mrr = 0.0;
            for (pos, item) in ranked.iter().enumerate() {
                if pos < 10 && rel.contains(item) {
                    naive_mrr = 1.0 / (pos as f64 + 1.0);
                    break;
                }
                if pos >= 10 {
                    break;
                }
            }
            let mut naive_dcg = 0.0;
            for (pos, item) in ranked.iter().enumerate() {
                if pos < 10 && rel.contains(item) {
                    naive_dcg += 1.0 / math::log2(pos as f64 + 2.0);
                }
            }
            let mut naive_ideal = 0.0;
            for pos in 0..rel.len().min(10) {
                naive_ideal += 1.0 / math::log2(pos as f64 + 2.0);
            }
            let naive_ndcg = if rel.is_empty() { 0.0 } else { naive_dcg / naive_ideal };

            assert!((mrr_at(&ranked, &rel, 10) - naive_mrr).abs() < 1e-12);
            assert!((ndcg_at(&ranked, &rel, 10) - naive_ndcg).abs() < 1e-12);
            if !rel.is_empty() {
                let hits = ranked.iter().take(50).filter(|i| rel.contains(i)).count();
                let naive_recall = hits as f64 / rel.len() as f64;
                assert!((recall_at(&ranked, &rel, 50).unwrap() - naive_recall).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_ignore_order_below_cutoff() {
        let mut ranked: Vec<usize> = (0..30).collect();
        let rel = relevant(&[2, 5]);
        let before = (
            mrr_at(&ranked, &rel, 10),
            ndcg_at(&ranked, &rel, 10),
        );
        ranked[15..].reverse();
        let after = (
            mrr_at(&ranked, &rel, 10),
            ndcg_at(&ranked, &rel, 10),
        );
        assert_eq!(before, after);
    }

    #[test]
    fn t_test_matches_hand_computation() {
        // d = [1,2,3,4,5]: mean 3, sd sqrt(2.5), t = 3/(sqrt(2.5)/sqrt(5)) = 4.2426
        let a = [2.0, 4.0, 6.0, 8.0, 10.0];
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        match paired_t_test(&a, &b, 1).unwrap() {
            TTestResult::Computed { t, p, p_adjusted } => {
                assert!((t - 4.242640687119285).abs() < 1e-9);
                assert!((p - 0.0132).abs() < 1e-3);
                assert_eq!(p, p_adjusted);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn t_test_no_difference_sentinel() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&a, &a, 1).unwrap(), TTestResult::NoDifference);
    }

    #[test]
    fn t_test_dominant_differences_give_small_p() {
        let a = [1.001, 1.002, 0.999, 1.0005];
        let b = [0.0, 0.0, 0.0, 0.0];
        match paired_t_test(&a, &b, 1).unwrap() {
            TTestResult::Computed { p, .. } => assert!(p < 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bonferroni_caps_at_one() {
        let a = [1.0, 2.0, 3.0, 2.5];
        let b = [1.5, 1.0, 3.5, 2.0];
        match paired_t_test(&a, &b, 1000).unwrap() {
            TTestResult::Computed { p_adjusted, .. } => assert_eq!(p_adjusted, 1.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn t_test_length_and_size_errors() {
        assert!(paired_t_test(&[1.0], &[1.0], 1).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0], 1).is_err());
    }

    #[test]
    fn incomplete_beta_edge_cases() {
        assert_eq!(incomplete_beta(2.0, 0.5, 0.0), 0.0);
        assert_eq!(incomplete_beta(2.0, 0.5, 1.0), 1.0);
        // I_x(1,1) = x (uniform)
        for x in [0.1, 0.5, 0.9] {
            assert!((incomplete_beta(1.0, 1.0, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_report_contract() {
        fn report(vals: &[(&str, f64)]) -> MetricReport {
            let outcomes = vals
                .iter()
                .enumerate()
                .map(|(i, (u, v))| QueryOutcome {
                    interaction: i,
                    functionality: Functionality::KeywordSearch,
                    user: Some(u.to_string()),
                    mrr: *v,
                    ndcg: *v,
                    recall: *v,
                })
                .collect();
            MetricReport::from_outcomes(outcomes)
        }
        let a = report(&[("u1", 1.0), ("u2", 0.5), ("u3", 0.0)]);
        let b = report(&[("u1", 0.0), ("u2", 0.5), ("u3", 1.0)]);

        let same = per_user_delta_report(&a, &a);
        assert!(same.rows.iter().all(|(_, d)| *d == 0.0));
        assert_eq!(same.fraction_zero, 1.0);

        let delta = per_user_delta_report(&a, &b);
        assert_eq!(delta.rows[0], ("u1".to_string(), 1.0));
        assert_eq!(delta.rows[2], ("u3".to_string(), -1.0));
        let total =
            delta.fraction_positive + delta.fraction_zero + delta.fraction_negative;
        assert!((total - 1.0).abs() < 1e-12);
    }
}
