//! Batch command-line pipeline for the retrieval engine.
//!
//! Each subcommand runs one pipeline stage against a workspace directory,
//! prints human-readable progress to stderr, and ends with one
//! machine-readable JSON summary line on stdout. Exit codes: 0 success,
//! 2 usage, 3 missing prerequisite artifact, 4 validation failure.

mod config;
mod io;
mod report;
mod workspace;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uia_core::corpus::{
    esci_to_triples, leave_last_out_split, Functionality, Request, RequestPayload,
};
use uia_core::eval::{
    evaluate, run_ablation, AblationVariant, EvalConfig, EvalMode,
};
use uia_core::index::{build_dense_index, check_provenance};
use uia_core::lexical::LexicalIndex;
use uia_core::synth::{generate_world, WorldConfig};
use uia_core::training::{
    build_pretrain_examples, collect_positives, finetune_personalized, gradient_check,
    mine_bm25_negatives, mine_self_negatives, pretrain_stage1, pretrain_stage2, run_full_pipeline,
    TrainOutcome,
};
use uia_core::Rng;

use crate::config::Settings;
use crate::workspace::{validate_workspace, MissingArtifact, Workspace};

#[derive(Parser)]
#[command(
    name = "uia",
    about = "Unified personalized dense retrieval: one bi-encoder for search, query-by-example, and complementary recommendation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct WsArgs {
    /// Workspace directory holding all pipeline artifacts.
    #[arg(long = "ws", alias = "in", env = "UIA_WORKSPACE")]
    workspace: PathBuf,
    /// Config file (default: <ws>/uia.cfg when present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (flag > config > default).
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count override for every stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size override.
    #[arg(long)]
    batch_size: Option<usize>,
}

impl WsArgs {
    fn workspace(&self) -> Workspace {
        Workspace::new(&self.workspace)
    }

    fn settings(&self) -> Result<Settings> {
        let ws = self.workspace();
        let path = self.config.clone().or_else(|| ws.default_config());
        let mut settings = Settings::load(path.as_deref())?;
        if let Some(seed) = self.seed {
            settings.train.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            settings.apply("epochs", &epochs.to_string())?;
        }
        if let Some(batch) = self.batch_size {
            settings.apply("batch_size", &batch.to_string())?;
        }
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction world into a workspace.
    Synth {
        /// Output workspace directory.
        #[arg(long, alias = "ws")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        categories: usize,
        #[arg(long, default_value_t = 50)]
        items_per_category: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        interactions_per_user: usize,
    },
    /// Import items plus either interactions or ESCI judgments.
    Ingest {
        #[arg(long = "ws")]
        workspace: PathBuf,
        /// items.jsonl to import.
        #[arg(long)]
        items: PathBuf,
        /// interactions.jsonl to import.
        #[arg(long, conflicts_with = "esci")]
        interactions: Option<PathBuf>,
        /// esci.jsonl of (query, item, label) judgments to convert.
        #[arg(long)]
        esci: Option<PathBuf>,
    },
    /// Leave-last-out split of the workspace interactions.
    Split(WsArgs),
    /// Build the BM25 inverted index over item text.
    BuildLexical(WsArgs),
    /// Non-personalized pre-training (stage 1: BM25 negatives; stage 2:
    /// self negatives from the stage-1 dense index).
    Pretrain {
        #[command(flatten)]
        ws: WsArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Encode all items under a checkpoint into a dense index.
    BuildIndex {
        #[command(flatten)]
        ws: WsArgs,
        /// Checkpoint stage: pretrain1, pretrain2, or finetune.
        #[arg(long)]
        checkpoint: String,
    },
    /// Mine hard negatives for the training split (diagnostic dump).
    MineNegatives {
        #[command(flatten)]
        ws: WsArgs,
        /// bm25 or self.
        #[arg(long)]
        source: String,
        /// Cap on the number of dumped examples.
        #[arg(long, default_value_t = 1000)]
        limit: usize,
    },
    /// Personalized fine-tuning on top of a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        ws: WsArgs,
        /// Stage to start from (default pretrain2).
        #[arg(long, default_value = "pretrain2")]
        from: String,
    },
    /// Rank items for one ad-hoc request.
    Retrieve {
        #[command(flatten)]
        ws: WsArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        functionality: u8,
        #[arg(long)]
        query: Option<String>,
        #[arg(long)]
        anchor_item: Option<String>,
        #[arg(long)]
        user: Option<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "finetune")]
        checkpoint: String,
        /// Use the approximate graph index instead of exact search.
        #[arg(long)]
        approx: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        ws: WsArgs,
        #[arg(long, default_value = "finetune")]
        checkpoint: String,
        /// personalized or non-personalized.
        #[arg(long, default_value = "personalized")]
        mode: String,
        /// Another report JSON to diff per-user NDCG against (writes TSV).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and evaluate an ablated configuration.
    Ablate {
        #[command(flatten)]
        ws: WsArgs,
        /// full, no_f, task_specific_search, task_specific_qbe,
        /// task_specific_cir, no_apn, per_functionality_history, no_collab.
        #[arg(long)]
        variant: String,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Inspect a workspace: artifact presence and provenance consistency.
    Validate {
        #[arg(long = "ws")]
        workspace: PathBuf,
    },
}

/// Marker for exit code 4.
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn main() {
    let cli = Cli::parse();
    let started = Instant::now();
    if let Err(err) = run(cli.command, started) {
        eprintln!("error: {err:#}");
        let code = if err.downcast_ref::<MissingArtifact>().is_some() {
            3
        } else if err.downcast_ref::<ValidationFailure>().is_some() {
            4
        } else {
            1
        };
        std::process::exit(code);
    }
}

fn summary(stage: &str, started: Instant, outputs: &[PathBuf], extra: serde_json::Value) {
    let mut doc = serde_json::json!({
        "stage": stage,
        "wall_time_ms": started.elapsed().as_millis() as u64,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    if let (Some(obj), Some(extra)) = (doc.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    println!("{doc}");
}

fn load_corpus(ws: &Workspace) -> Result<(uia_core::ItemCollection, uia_core::InteractionLog)> {
    ws.require(&ws.items(), "run `uia synth` or `uia ingest` first")?;
    ws.require(&ws.interactions(), "run `uia synth` or `uia ingest` first")?;
    let items = io::load_items(&ws.items())?;
    let log = io::load_interactions(&ws.interactions(), &items)?;
    Ok((items, log))
}

fn load_split_checked(
    ws: &Workspace,
    log: &uia_core::InteractionLog,
) -> Result<uia_core::corpus::DatasetSplit> {
    ws.require(&ws.split(), "run `uia split` first")?;
    let split = io::load_split(&ws.split())?;
    let total = split.train.len() + split.valid.len() + split.test.len();
    if total != log.len() {
        return Err(anyhow!(ValidationFailure(format!(
            "split covers {total} interactions but the log has {}; re-run `uia split`",
            log.len()
        ))));
    }
    Ok(split)
}

fn load_lexical(ws: &Workspace) -> Result<LexicalIndex> {
    ws.require(&ws.lexical(), "run `uia build-lexical` first")?;
    let bytes = io::read_bytes(&ws.lexical())?;
    LexicalIndex::from_bytes(&bytes).map_err(|e| anyhow!("{}: {e}", ws.lexical().display()))
}

fn train_outcome_json(outcome: &TrainOutcome) -> serde_json::Value {
    serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.iter().map(|e| serde_json::json!({
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "valid_ndcg": if e.valid_ndcg.is_nan() { serde_json::Value::Null } else { serde_json::json!(e.valid_ndcg) },
        })).collect::<Vec<_>>(),
    })
}

fn run(command: Command, started: Instant) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            categories,
            items_per_category,
            users,
            interactions_per_user,
        } => {
            let ws = Workspace::new(&out);
            ws.create()?;
            let config = WorldConfig {
                categories,
                items_per_category,
                users,
                interactions_per_user,
                seed,
                ..WorldConfig::default()
            };
            eprintln!(
                "generating world: {categories} categories x {items_per_category} items, {users} users"
            );
            let world = generate_world(&config);
            io::save_items(&ws.items(), &world.items)?;
            io::save_interactions(&ws.interactions(), &world.log)?;
            io::save_ground_truth(&ws.ground_truth(), &world)?;
            summary(
                "synth",
                started,
                &[ws.items(), ws.interactions(), ws.ground_truth()],
                serde_json::json!({
                    "items": world.items.len(),
                    "interactions": world.log.len(),
                    "users": world.log.num_users(),
                    "seed": seed,
                }),
            );
            Ok(())
        }

        Command::Ingest {
            workspace,
            items,
            interactions,
            esci,
        } => {
            let ws = Workspace::new(&workspace);
            ws.create()?;
            let collection = io::load_items(&items)?;
            let log = match (&interactions, &esci) {
                (Some(path), None) => io::load_interactions(path, &collection)?,
                (None, Some(path)) => {
                    let judgments = io::load_esci(path)?;
                    let triples = esci_to_triples(&judgments);
                    eprintln!(
                        "esci conversion: {} search, {} qbe, {} cir pairs",
                        triples.search.len(),
                        triples.qbe.len(),
                        triples.cir.len()
                    );
                    uia_core::InteractionLog::from_interactions(
                        triples.to_interactions(),
                        &collection,
                    )
                    .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?
                }
                _ => bail!(ValidationFailure(
                    "ingest needs exactly one of --interactions or --esci".to_string()
                )),
            };
            io::save_items(&ws.items(), &collection)?;
            io::save_interactions(&ws.interactions(), &log)?;
            summary(
                "ingest",
                started,
                &[ws.items(), ws.interactions()],
                serde_json::json!({
                    "items": collection.len(),
                    "interactions": log.len(),
                    "users": log.num_users(),
                }),
            );
            Ok(())
        }

        Command::Split(args) => {
            let ws = args.workspace();
            let (_, log) = load_corpus(&ws)?;
            let split = leave_last_out_split(&log);
            io::save_split(&ws.split(), &split)?;
            eprintln!(
                "split sizes: train={} valid={} test={}",
                split.train.len(),
                split.valid.len(),
                split.test.len()
            );
            summary(
                "split",
                started,
                &[ws.split()],
                serde_json::json!({
                    "train": split.train.len(),
                    "valid": split.valid.len(),
                    "test": split.test.len(),
                }),
            );
            Ok(())
        }

        Command::BuildLexical(args) => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, _) = load_corpus(&ws)?;
            let index = LexicalIndex::build(&items, settings.k1, settings.b)
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
            io::write_bytes(&ws.lexical(), &index.to_bytes())?;
            summary(
                "build-lexical",
                started,
                &[ws.lexical()],
                serde_json::json!({
                    "docs": index.num_docs(),
                    "terms": index.num_terms(),
                    "avg_doc_length": index.avg_doc_length(),
                }),
            );
            Ok(())
        }

        Command::Pretrain { ws: args, stage } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            let split = load_split_checked(&ws, &log)?;
            let lexical = load_lexical(&ws)?;

            let outcome = match stage {
                1 => pretrain_stage1(
                    settings.model,
                    &items,
                    &log,
                    &split,
                    &lexical,
                    &settings.train,
                ),
                2 => {
                    ws.require(
                        &ws.checkpoint("pretrain1"),
                        "run `uia pretrain --stage 1` first",
                    )?;
                    ws.require(
                        &ws.dense_index("pretrain1"),
                        "run `uia build-index --checkpoint pretrain1` first",
                    )?;
                    let (bundle, ckpt) = ws.load_bundle("pretrain1")?;
                    let tag = ckpt.hash_tag();
                    let index = ws.load_index("pretrain1", Some(bundle.params.config.dim))?;
                    pretrain_stage2(
                        &bundle,
                        &tag,
                        &index,
                        &items,
                        &log,
                        &split,
                        &settings.train,
                    )
                }
                _ => unreachable!("clap range"),
            }
            .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;

            let stage_name = if stage == 1 { "pretrain1" } else { "pretrain2" };
            let ckpt = outcome.bundle.to_checkpoint(stage_name);
            io::write_bytes(&ws.checkpoint(stage_name), &ckpt.to_bytes())?;
            for e in &outcome.history {
                eprintln!(
                    "epoch {}: loss {:.4} valid NDCG@10 {:.4}",
                    e.epoch, e.train_loss, e.valid_ndcg
                );
            }
            summary(
                stage_name,
                started,
                &[ws.checkpoint(stage_name)],
                train_outcome_json(&outcome),
            );
            Ok(())
        }

        Command::BuildIndex { ws: args, checkpoint } => {
            let ws = args.workspace();
            let (items, _) = load_corpus(&ws)?;
            ws.require(
                &ws.checkpoint(&checkpoint),
                "train that checkpoint stage first",
            )?;
            let (bundle, ckpt) = ws.load_bundle(&checkpoint)?;
            let tag = ckpt.hash_tag();
            let index = build_dense_index(&bundle.params, &bundle.vocab, &items, tag.clone())
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
            io::write_bytes(&ws.dense_index(&checkpoint), &index.to_bytes())?;
            summary(
                "build-index",
                started,
                &[ws.dense_index(&checkpoint)],
                serde_json::json!({
                    "checkpoint": checkpoint,
                    "vectors": index.len(),
                    "dim": index.dim(),
                    "tag": tag,
                    "adapted": bundle.params.apn.is_some(),
                }),
            );
            Ok(())
        }

        Command::MineNegatives {
            ws: args,
            source,
            limit,
        } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            let split = load_split_checked(&ws, &log)?;
            let examples = build_pretrain_examples(&log, &split.train, &items, None);
            let positives = collect_positives(&log, &split.train, &items);
            let mut rng = Rng::new(settings.train.seed);
            let out_path = ws.negatives(&source);
            let mut lines = Vec::new();

            match source.as_str() {
                "bm25" => {
                    let lexical = load_lexical(&ws)?;
                    for ex in examples.iter().take(limit) {
                        let negs = mine_bm25_negatives(
                            &lexical,
                            &items,
                            &ex.request,
                            &positives[&ex.request.key()],
                            settings.train.pool_size,
                            settings.train.neg_ratio,
                            &mut rng,
                        );
                        lines.push(negatives_line(&items, ex.interaction, ex.positive, &negs));
                    }
                }
                "self" => {
                    ws.require(
                        &ws.checkpoint("pretrain1"),
                        "self mining needs the pretrain1 checkpoint",
                    )?;
                    ws.require(
                        &ws.dense_index("pretrain1"),
                        "run `uia build-index --checkpoint pretrain1` first",
                    )?;
                    let (bundle, ckpt) = ws.load_bundle("pretrain1")?;
                    let tag = ckpt.hash_tag();
                    let index = ws.load_index("pretrain1", Some(bundle.params.config.dim))?;
                    let eval_cfg = EvalConfig::default();
                    for ex in examples.iter().take(limit) {
                        let request_vec = uia_core::eval::request_vector(
                            &bundle,
                            &items,
                            &log,
                            &ex.request,
                            &None,
                            0,
                            EvalMode::NonPersonalized,
                            &eval_cfg,
                            &BTreeSet::new(),
                        )
                        .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
                        let negs = mine_self_negatives(
                            &index,
                            &tag,
                            &request_vec,
                            items.len(),
                            &positives[&ex.request.key()],
                            settings.train.pool_size,
                            settings.train.neg_ratio,
                            &mut rng,
                        )
                        .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
                        lines.push(negatives_line(&items, ex.interaction, ex.positive, &negs));
                    }
                }
                other => bail!(ValidationFailure(format!(
                    "unknown mining source {other:?} (expected bm25 or self)"
                ))),
            }
            std::fs::write(&out_path, lines.join("\n") + "\n")?;
            summary(
                "mine-negatives",
                started,
                &[out_path],
                serde_json::json!({ "source": source, "examples": lines.len() }),
            );
            Ok(())
        }

        Command::Finetune { ws: args, from } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            let split = load_split_checked(&ws, &log)?;
            let lexical = load_lexical(&ws)?;
            ws.require(
                &ws.checkpoint(&from),
                "run the pre-training stages first",
            )?;
            let (bundle, _) = ws.load_bundle(&from)?;
            let outcome =
                finetune_personalized(&bundle, &items, &log, &split, &lexical, &settings.train)
                    .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
            let ckpt = outcome.bundle.to_checkpoint("finetune");
            io::write_bytes(&ws.checkpoint("finetune"), &ckpt.to_bytes())?;
            for e in &outcome.history {
                eprintln!(
                    "epoch {}: loss {:.4} valid NDCG@10 {:.4}",
                    e.epoch, e.train_loss, e.valid_ndcg
                );
            }
            summary(
                "finetune",
                started,
                &[ws.checkpoint("finetune")],
                train_outcome_json(&outcome),
            );
            Ok(())
        }

        Command::Retrieve {
            ws: args,
            functionality,
            query,
            anchor_item,
            user,
            k,
            checkpoint,
            approx,
        } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            ws.require(&ws.checkpoint(&checkpoint), "train that stage first")?;
            ws.require(
                &ws.dense_index(&checkpoint),
                "run `uia build-index` for that checkpoint first",
            )?;
            let (bundle, ckpt) = ws.load_bundle(&checkpoint)?;
            let tag = ckpt.hash_tag();
            let index = ws.load_index(&checkpoint, Some(bundle.params.config.dim))?;
            check_provenance(&index, &tag)
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;

            let functionality = Functionality::from_id(functionality).expect("clap range");
            let payload = match (functionality, query, anchor_item) {
                (Functionality::KeywordSearch, Some(q), None) => RequestPayload::QueryText(q),
                (Functionality::KeywordSearch, _, _) => bail!(ValidationFailure(
                    "keyword search takes --query (and no --anchor-item)".to_string()
                )),
                (_, None, Some(a)) => RequestPayload::AnchorItem(a),
                (_, _, _) => bail!(ValidationFailure(
                    "query-by-example and complementary recommendation take --anchor-item".to_string()
                )),
            };
            let request = Request {
                functionality,
                payload,
            };
            request
                .validate(&items)
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;

            let mode = if bundle.params.apn.is_some() {
                EvalMode::Personalized
            } else {
                EvalMode::NonPersonalized
            };
            let request_vec = uia_core::eval::request_vector(
                &bundle,
                &items,
                &log,
                &request,
                &user,
                u64::MAX,
                mode,
                &EvalConfig::default(),
                &BTreeSet::new(),
            )
            .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;

            let hits = if approx {
                let params = uia_core::index::ApproxParams::default();
                let graph = uia_core::index::ApproxIndex::build(&index, params)
                    .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
                graph
                    .topk(
                        &index,
                        &request_vec,
                        k,
                        uia_core::index::DEFAULT_EF_SEARCH.max(k),
                    )
                    .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?
            } else {
                index
                    .exact_topk(&request_vec, k)
                    .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?
            };
            for (rank, (ord, score)) in hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, index.item_id(*ord), score);
            }
            summary(
                "retrieve",
                started,
                &[],
                serde_json::json!({
                    "returned": hits.len(),
                    "personalized": mode == EvalMode::Personalized,
                    "approx": approx,
                    "seed": settings.train.seed,
                }),
            );
            Ok(())
        }

        Command::Eval {
            ws: args,
            checkpoint,
            mode,
            compare,
        } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            let split = load_split_checked(&ws, &log)?;
            ws.require(&ws.checkpoint(&checkpoint), "train that stage first")?;
            ws.require(
                &ws.dense_index(&checkpoint),
                "run `uia build-index` for that checkpoint first",
            )?;
            let (bundle, ckpt) = ws.load_bundle(&checkpoint)?;
            let tag = ckpt.hash_tag();
            let index = ws.load_index(&checkpoint, Some(bundle.params.config.dim))?;

            let eval_mode = match mode.as_str() {
                "personalized" => EvalMode::Personalized,
                "non-personalized" => EvalMode::NonPersonalized,
                other => bail!(ValidationFailure(format!(
                    "unknown mode {other:?} (expected personalized or non-personalized)"
                ))),
            };
            let eval_cfg = EvalConfig {
                k_retrieve: settings.k_retrieve,
                ..EvalConfig::default()
            };
            let report = evaluate(
                &bundle, &items, &log, &split, &index, &tag, eval_mode, &eval_cfg,
            )
            .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;

            let name = format!("{checkpoint}_{mode}");
            let doc = report::to_document(&report);
            std::fs::write(
                ws.report_json(&name),
                serde_json::to_string_pretty(&doc)?,
            )?;
            std::fs::write(ws.report_text(&name), report::to_text_table(&report))?;
            eprint!("{}", report::to_text_table(&report));

            let mut outputs = vec![ws.report_json(&name), ws.report_text(&name)];
            if let Some(other_path) = compare {
                let other: report::ReportDocument =
                    serde_json::from_str(&std::fs::read_to_string(&other_path)?)
                        .with_context(|| format!("parsing {}", other_path.display()))?;
                let tsv = report::delta_tsv_against(&doc, &other);
                let delta_path = ws.user_delta_tsv(&name);
                std::fs::write(&delta_path, tsv)?;
                outputs.push(delta_path);
            }

            let metrics: serde_json::Value = serde_json::to_value(&doc.per_functionality)?;
            summary(
                "eval",
                started,
                &outputs,
                serde_json::json!({ "mode": mode, "checkpoint": checkpoint, "metrics": metrics }),
            );
            Ok(())
        }

        Command::Ablate { ws: args, variant } => {
            let ws = args.workspace();
            let settings = args.settings()?;
            let (items, log) = load_corpus(&ws)?;
            let split = load_split_checked(&ws, &log)?;
            let lexical = load_lexical(&ws)?;

            let report = if variant == "full" {
                let pipeline = run_full_pipeline(
                    settings.model,
                    &items,
                    &log,
                    &split,
                    &lexical,
                    &settings.train,
                    true,
                )
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
                evaluate(
                    pipeline.final_bundle(),
                    &items,
                    &log,
                    &split,
                    &pipeline.final_index,
                    &pipeline.final_tag,
                    EvalMode::Personalized,
                    &EvalConfig {
                        k_retrieve: settings.k_retrieve,
                        ..EvalConfig::default()
                    },
                )
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?
            } else {
                let parsed = AblationVariant::parse(&variant).ok_or_else(|| {
                    anyhow!(ValidationFailure(format!(
                        "unknown ablation variant {variant:?}"
                    )))
                })?;
                run_ablation(
                    parsed,
                    settings.model,
                    &items,
                    &log,
                    &split,
                    &lexical,
                    &settings.train,
                )
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?
                .report
            };

            let doc = report::to_document(&report);
            std::fs::write(
                ws.report_json(&variant),
                serde_json::to_string_pretty(&doc)?,
            )?;
            std::fs::write(ws.report_text(&variant), report::to_text_table(&report))?;
            eprint!("{}", report::to_text_table(&report));
            let metrics: serde_json::Value = serde_json::to_value(&doc.per_functionality)?;
            summary(
                "ablate",
                started,
                &[ws.report_json(&variant), ws.report_text(&variant)],
                serde_json::json!({ "variant": variant, "metrics": metrics }),
            );
            Ok(())
        }

        Command::Gradcheck {
            seed,
            tolerance,
            step,
        } => {
            let report = gradient_check(seed, step)
                .map_err(|e| anyhow!(ValidationFailure(e.to_string())))?;
            for (name, err) in &report.groups {
                eprintln!("{name:<28} max rel err {err:.3e}");
            }
            let ok = report.within(tolerance);
            summary(
                "gradcheck",
                started,
                &[],
                serde_json::json!({
                    "max_rel_error": report.max_error(),
                    "tolerance": tolerance,
                    "groups": report.groups.len(),
                    "ok": ok,
                }),
            );
            if !ok {
                bail!(ValidationFailure(format!(
                    "gradient check failed: max relative error {} exceeds {tolerance}",
                    report.max_error()
                )));
            }
            Ok(())
        }

        Command::Validate { workspace } => {
            let ws = Workspace::new(&workspace);
            if !ws.root().exists() {
                bail!(ValidationFailure(format!(
                    "workspace {} does not exist",
                    ws.root().display()
                )));
            }
            let report = validate_workspace(&ws);
            summary(
                "validate",
                started,
                &[],
                serde_json::to_value(&report)?,
            );
            Ok(())
        }
    }
}

fn negatives_line(
    items: &uia_core::ItemCollection,
    interaction: usize,
    positive: usize,
    negatives: &[usize],
) -> String {
    serde_json::json!({
        "interaction": interaction,
        "positive": items.get(positive).item_id,
        "negatives": negatives.iter().map(|&n| items.get(n).item_id.clone()).collect::<Vec<_>>(),
    })
    .to_string()
}
