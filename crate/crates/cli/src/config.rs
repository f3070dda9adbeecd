//! Flat key-value configuration with flag > file > default precedence.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

use uia_core::model::ModelConfig;
use uia_core::training::TrainConfig;

/// Documented keys: stage, batch_size, lr_pretrain, lr_finetune, epochs,
/// epochs_pretrain1, epochs_pretrain2, epochs_finetune, neg_ratio,
/// pool_size, N, N_h, l, l_v, l_u, l_f, d, d_e, l_max, min_count, seed,
/// min_search, min_qbe, min_cir, k1, b, k_retrieve.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub k1: f64,
    pub b: f64,
    pub k_retrieve: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k1: uia_core::lexical::DEFAULT_K1,
            b: uia_core::lexical::DEFAULT_B,
            k_retrieve: 100,
        }
    }
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), no + 1);
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl Settings {
    /// Loads settings from an optional config file; unknown keys are
    /// rejected so typos surface instead of silently using defaults.
    pub fn load(config_path: Option<&Path>) -> Result<Self> {
        let mut settings = Settings::default();
        let Some(path) = config_path else {
            return Ok(settings);
        };
        if !path.exists() {
            bail!("config file {} does not exist", path.display());
        }
        let map = parse_file(path)?;
        for (key, value) in &map {
            settings.apply(key, value).with_context(|| {
                format!("config {}: key {key} = {value}", path.display())
            })?;
        }
        Ok(settings)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn usize_of(v: &str) -> Result<usize> {
            Ok(v.parse::<usize>()?)
        }
        fn f64_of(v: &str) -> Result<f64> {
            Ok(v.parse::<f64>()?)
        }
        match key {
            "batch_size" => self.train.batch_size = usize_of(value)?,
            "lr_pretrain" => self.train.lr_pretrain = f64_of(value)?,
            "lr_finetune" => self.train.lr_finetune = f64_of(value)?,
            "epochs" => {
                let e = usize_of(value)?;
                self.train.epochs_pretrain1 = e;
                self.train.epochs_pretrain2 = e;
                self.train.epochs_finetune = e;
            }
            "epochs_pretrain1" => self.train.epochs_pretrain1 = usize_of(value)?,
            "epochs_pretrain2" => self.train.epochs_pretrain2 = usize_of(value)?,
            "epochs_finetune" => self.train.epochs_finetune = usize_of(value)?,
            "neg_ratio" => self.train.neg_ratio = usize_of(value)?,
            "pool_size" => self.train.pool_size = usize_of(value)?,
            "seed" => self.train.seed = value.parse::<u64>()?,
            "N" => self.model.history_len = usize_of(value)?,
            "N_h" => self.model.num_heads = usize_of(value)?,
            "l" => self.model.key_dim = usize_of(value)?,
            "l_v" => self.model.value_dim = usize_of(value)?,
            "l_u" => self.model.user_dim = usize_of(value)?,
            "l_f" => self.model.func_dim = usize_of(value)?,
            "d" => self.model.dim = usize_of(value)?,
            "d_e" => self.model.embed_dim = usize_of(value)?,
            "l_max" => self.model.max_seq_len = usize_of(value)?,
            "min_count" => self.model.min_term_count = usize_of(value)?,
            "min_search" => self.train.thresholds.search = usize_of(value)?,
            "min_qbe" => self.train.thresholds.qbe = usize_of(value)?,
            "min_cir" => self.train.thresholds.cir = usize_of(value)?,
            "k1" => self.k1 = f64_of(value)?,
            "b" => self.b = f64_of(value)?,
            "k_retrieve" => self.k_retrieve = usize_of(value)?,
            "stage" => {} // informational; the subcommand names the stage
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Rejects dimension combinations the model cannot run with.
    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid model config: {e}"))?;
        self.train
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid training config: {e}"))?;
        Ok(())
    }
}
