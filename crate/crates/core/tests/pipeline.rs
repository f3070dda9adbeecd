//! End-to-end pipeline behavior on small synthetic worlds.

use uia_core::corpus::{
    leave_last_out_split, FinetuneThresholds, Functionality, Interaction, InteractionLog, Item,
    ItemCollection, Request, RequestPayload,
};
use uia_core::eval::{evaluate, mrr_at, ndcg_at, recall_at, EvalConfig, EvalMode};
use uia_core::index::{build_dense_index, DenseIndex};
use uia_core::lexical::{LexicalIndex, DEFAULT_B, DEFAULT_K1};
use uia_core::matrix::Matrix;
use uia_core::model::ModelConfig;
use uia_core::rng::Rng;
use uia_core::synth::{generate_world, WorldConfig};
use uia_core::training::{run_full_pipeline, TrainConfig};

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        dim: 8,
        num_heads: 2,
        key_dim: 4,
        value_dim: 4,
        user_dim: 4,
        func_dim: 4,
        history_len: 3,
        max_seq_len: 32,
        min_term_count: 1,
    }
}

fn fast_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs_pretrain1: 1,
        epochs_pretrain2: 1,
        epochs_finetune: 1,
        seed,
        thresholds: FinetuneThresholds {
            search: 2,
            qbe: 2,
            cir: 2,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn full_pipeline_runs_and_evaluates() {
    let world = generate_world(&WorldConfig::tiny(21));
    let lexical = LexicalIndex::build(&world.items, DEFAULT_K1, DEFAULT_B).unwrap();
    let split = leave_last_out_split(&world.log);
    let pipeline = run_full_pipeline(
        tiny_model_config(),
        &world.items,
        &world.log,
        &split,
        &lexical,
        &fast_train_config(1),
        true,
    )
    .unwrap();
    assert!(pipeline.finetuned.is_some());

    let report = evaluate(
        pipeline.final_bundle(),
        &world.items,
        &world.log,
        &split,
        &pipeline.final_index,
        &pipeline.final_tag,
        EvalMode::Personalized,
        &EvalConfig::default(),
    )
    .unwrap();

    // query counts equal test-split sizes per functionality
    let mut expected: std::collections::BTreeMap<Functionality, usize> =
        std::collections::BTreeMap::new();
    for &t in &split.test {
        *expected
            .entry(world.log.get(t).request.functionality)
            .or_default() += 1;
    }
    for (f, n) in expected {
        assert_eq!(report.summary(f).query_count, n);
    }
    // metrics stay in [0, 1]
    for s in report.per_functionality.values() {
        for v in [s.mrr, s.ndcg, s.recall] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn evaluation_refuses_tag_mismatched_index() {
    let world = generate_world(&WorldConfig::tiny(22));
    let lexical = LexicalIndex::build(&world.items, DEFAULT_K1, DEFAULT_B).unwrap();
    let split = leave_last_out_split(&world.log);
    let pipeline = run_full_pipeline(
        tiny_model_config(),
        &world.items,
        &world.log,
        &split,
        &lexical,
        &fast_train_config(2),
        false,
    )
    .unwrap();
    let err = evaluate(
        pipeline.final_bundle(),
        &world.items,
        &world.log,
        &split,
        &pipeline.final_index,
        "different-tag",
        EvalMode::NonPersonalized,
        &EvalConfig::default(),
    )
    .unwrap_err();
    assert!(format!("{err}").contains("tag"));
}

#[test]
fn index_scoring_introduces_no_transformation() {
    // retrieval scores through the personalized index equal the direct
    // dot product of the personalized request and adapted item vectors
    let world = generate_world(&WorldConfig::tiny(23));
    let lexical = LexicalIndex::build(&world.items, DEFAULT_K1, DEFAULT_B).unwrap();
    let split = leave_last_out_split(&world.log);
    let pipeline = run_full_pipeline(
        tiny_model_config(),
        &world.items,
        &world.log,
        &split,
        &lexical,
        &fast_train_config(3),
        true,
    )
    .unwrap();
    let bundle = pipeline.final_bundle();
    let t = split.test[0];
    let request_vec = uia_core::eval::eval_request_vector(
        bundle,
        &world.items,
        &world.log,
        t,
        EvalMode::Personalized,
        &EvalConfig::default(),
        &Default::default(),
    )
    .unwrap();
    let hits = pipeline.final_index.exact_topk(&request_vec, 5).unwrap();
    for (ord, score) in hits {
        let direct = uia_core::apn::personalized_score(
            &request_vec,
            pipeline.final_index.vector(ord),
        )
        .unwrap();
        assert_eq!(score, direct);
    }
}

#[test]
fn pipeline_is_bitwise_reproducible() {
    let world = generate_world(&WorldConfig::tiny(24));
    let lexical = LexicalIndex::build(&world.items, DEFAULT_K1, DEFAULT_B).unwrap();
    let split = leave_last_out_split(&world.log);
    let run = || {
        run_full_pipeline(
            tiny_model_config(),
            &world.items,
            &world.log,
            &split,
            &lexical,
            &fast_train_config(4),
            true,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.final_bundle().to_checkpoint("finetune").to_bytes(),
        b.final_bundle().to_checkpoint("finetune").to_bytes()
    );
    assert_eq!(a.final_index.to_bytes(), b.final_index.to_bytes());
}

#[test]
fn perfect_scores_give_perfect_metrics() {
    // unit-norm distinct corpus: querying with an item's own vector ranks it
    // first, so all metrics hit 1.0
    let n = 20;
    let mut vectors = Matrix::zeros(n, n);
    for i in 0..n {
        vectors.set(i, i, 1.0);
    }
    let ids = (0..n).map(|i| format!("i{i}")).collect();
    let index = DenseIndex::new(vectors, ids, "oracle".to_string()).unwrap();
    for target in 0..n {
        let mut query = vec![0.0; n];
        query[target] = 1.0;
        let hits = index.exact_topk(&query, 10).unwrap();
        let ranked: Vec<usize> = hits.iter().map(|h| h.0).collect();
        let relevant = [target].into_iter().collect();
        assert_eq!(mrr_at(&ranked, &relevant, 10), 1.0);
        assert_eq!(ndcg_at(&ranked, &relevant, 10), 1.0);
        assert_eq!(recall_at(&ranked, &relevant, 50).unwrap(), 1.0);
    }
}

/// A world with no lexical correlation between requests and clicks, so an
/// untrained encoder ranks positives uniformly at random.
fn uncorrelated_world(num_items: usize, num_queries: usize, seed: u64) -> (ItemCollection, InteractionLog) {
    let mut rng = Rng::new(seed);
    let items: Vec<Item> = (0..num_items)
        .map(|i| Item {
            item_id: format!("i{i:04}"),
            text: format!("item{i:04}a item{i:04}b"),
        })
        .collect();
    let items = ItemCollection::from_items(items).unwrap();
    let raw: Vec<Interaction> = (0..num_queries)
        .map(|q| {
            let clicked = rng.next_below(num_items);
            Interaction {
                user_id: Some(format!("u{q}")),
                timestamp: 1,
                request: Request {
                    functionality: Functionality::KeywordSearch,
                    payload: RequestPayload::QueryText(format!("query{q:04}x query{q:04}y")),
                },
                clicked_item_id: format!("i{clicked:04}"),
            }
        })
        .collect();
    let log = InteractionLog::from_interactions(raw, &items).unwrap();
    (items, log)
}

#[test]
fn untrained_encoder_recall_matches_random_ranking_expectation() {
    // uniform random ranking of 1000 items: E[recall@50] = 50/1000 = 0.05
    let (items, log) = uncorrelated_world(1000, 400, 31);
    let vocab = uia_core::training::build_training_vocabulary(&items, &log, 1);
    let params = uia_core::model::ModelParams::init(tiny_model_config(), vocab.len(), &mut Rng::new(77));
    let bundle = uia_core::model::ModelBundle::new(params, vocab);
    let index = build_dense_index(&bundle.params, &bundle.vocab, &items, "t".to_string()).unwrap();

    let split = uia_core::corpus::DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: (0..log.len()).collect(),
    };
    let report = evaluate(
        &bundle,
        &items,
        &log,
        &split,
        &index,
        "t",
        EvalMode::NonPersonalized,
        &EvalConfig::default(),
    )
    .unwrap();
    let recall = report.summary(Functionality::KeywordSearch).recall;
    // 400 queries at p = 0.05: +-4 sigma is about +-0.044
    assert!(
        (0.006..=0.094).contains(&recall),
        "recall {recall} outside the random-ranking band"
    );
}
