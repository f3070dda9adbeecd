//! The full model: request encoder, item encoder, and optional
//! personalization network, with a fixed named-tensor enumeration shared by
//! the optimizer and the checkpoint format.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::apn::{ApnDims, ApnGrads, ApnParams, HeadParams};
use crate::checkpoint::{Checkpoint, CheckpointError, NamedTensor};
use crate::encoder::{EncoderGrads, EncoderParams, Vocabulary};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// All width and window hyperparameters of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Token/segment embedding width d_e.
    pub embed_dim: usize,
    /// Shared encoder output width d.
    pub dim: usize,
    /// Attention heads N_h.
    pub num_heads: usize,
    /// Per-head key width l.
    pub key_dim: usize,
    /// Per-head value width l_v.
    pub value_dim: usize,
    /// User embedding width l_u.
    pub user_dim: usize,
    /// Functionality embedding width l_f.
    pub func_dim: usize,
    /// History window length N.
    pub history_len: usize,
    /// Maximum composed input length.
    pub max_seq_len: usize,
    /// Vocabulary frequency threshold.
    pub min_term_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale defaults; all dimension relations are invariants, so a
        // config can scale d to 768 / N_h to 12 without code changes
        ModelConfig {
            embed_dim: 64,
            dim: 64,
            num_heads: 4,
            key_dim: 16,
            value_dim: 16,
            user_dim: 32,
            func_dim: 16,
            history_len: 5,
            max_seq_len: 64,
            min_term_count: 1,
        }
    }
}

impl ModelConfig {
    pub fn apn_dims(&self) -> ApnDims {
        ApnDims {
            dim: self.dim,
            num_heads: self.num_heads,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            user_dim: self.user_dim,
            func_dim: self.func_dim,
        }
    }

    pub fn validate(&self) -> Result<(), crate::apn::ApnError> {
        self.apn_dims().validate()
    }
}

/// Trainable parameters of the whole pipeline. The personalization network
/// is absent during non-personalized pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub request_encoder: EncoderParams,
    pub item_encoder: EncoderParams,
    pub apn: Option<ApnParams>,
}

impl ModelParams {
    /// Seeded initialization of the two encoders; no personalization yet.
    pub fn init(config: ModelConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        config.validate().expect("invalid model dimensions");
        ModelParams {
            config,
            request_encoder: EncoderParams::init(vocab_size, config.embed_dim, config.dim, rng),
            item_encoder: EncoderParams::init(vocab_size, config.embed_dim, config.dim, rng),
            apn: None,
        }
    }

    /// Attaches a freshly initialized personalization network for
    /// `num_users` known users (plus the cold-start fallback row).
    pub fn attach_apn(&mut self, num_users: usize, rng: &mut Rng) {
        let apn = ApnParams::init(self.config.apn_dims(), num_users, rng)
            .expect("config validated at init");
        self.apn = Some(apn);
    }

    /// Flat views of every tensor in a fixed, documented order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        collect_encoder(&self.request_encoder, "request", &mut out);
        collect_encoder(&self.item_encoder, "item", &mut out);
        if let Some(apn) = &self.apn {
            collect_apn_params(apn, &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        collect_encoder_mut(&mut self.request_encoder, "request", &mut out);
        collect_encoder_mut(&mut self.item_encoder, "item", &mut out);
        if let Some(apn) = &mut self.apn {
            collect_apn_params_mut(apn, &mut out);
        }
        out
    }

    /// Packs everything into a checkpoint; `stage` labels the producing
    /// pipeline step and `vocab` makes the snapshot self-contained.
    pub fn to_checkpoint(&self, vocab: &Vocabulary, stage: &str) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let c = &self.config;
        for (key, value) in [
            ("stage", stage.to_string()),
            ("embed_dim", c.embed_dim.to_string()),
            ("dim", c.dim.to_string()),
            ("num_heads", c.num_heads.to_string()),
            ("key_dim", c.key_dim.to_string()),
            ("value_dim", c.value_dim.to_string()),
            ("user_dim", c.user_dim.to_string()),
            ("func_dim", c.func_dim.to_string()),
            ("history_len", c.history_len.to_string()),
            ("max_seq_len", c.max_seq_len.to_string()),
            ("min_term_count", c.min_term_count.to_string()),
            (
                "num_users",
                self.apn
                    .as_ref()
                    .map(|a| a.num_users().to_string())
                    .unwrap_or_else(|| "0".to_string()),
            ),
            (
                "personalized",
                if self.apn.is_some() { "1" } else { "0" }.to_string(),
            ),
        ] {
            ckpt.meta.insert(key.to_string(), value);
        }
        ckpt.vocab_terms = vocab.terms().to_vec();
        for (name, data) in self.named_tensors() {
            ckpt.tensors.push(NamedTensor {
                name: name.clone(),
                shape: self.shape_of(&name),
                data: data.to_vec(),
            });
        }
        ckpt
    }

    fn shape_of(&self, name: &str) -> Vec<usize> {
        fn mat(m: &Matrix) -> Vec<usize> {
            alloc::vec![m.rows(), m.cols()]
        }
        fn enc(e: &EncoderParams, field: &str) -> Vec<usize> {
            match field {
                "token_embedding" => mat(&e.token_embedding),
                "segment_embedding" => mat(&e.segment_embedding),
                "w1" => mat(&e.w1),
                "b1" => alloc::vec![e.b1.len()],
                "w2" => mat(&e.w2),
                "b2" => alloc::vec![e.b2.len()],
                _ => unreachable!("unknown encoder field {field}"),
            }
        }
        let mut parts = name.split('.');
        let scope = parts.next().unwrap();
        match scope {
            "request" => enc(&self.request_encoder, parts.next().unwrap()),
            "item" => enc(&self.item_encoder, parts.next().unwrap()),
            "apn" => {
                let apn = self.apn.as_ref().expect("apn tensors require apn params");
                let field = parts.next().unwrap();
                match field {
                    "ln_gain" => alloc::vec![apn.ln_gain.len()],
                    "ln_bias" => alloc::vec![apn.ln_bias.len()],
                    "user_embedding" => mat(&apn.user_embedding),
                    "functionality_embedding" => mat(&apn.functionality_embedding),
                    "fusion_w" => mat(&apn.fusion_w),
                    "fusion_b" => alloc::vec![apn.fusion_b.len()],
                    "adapter_w1" => mat(&apn.adapter_w1),
                    "adapter_b1" => alloc::vec![apn.adapter_b1.len()],
                    "adapter_w2" => mat(&apn.adapter_w2),
                    "adapter_b2" => alloc::vec![apn.adapter_b2.len()],
                    head => {
                        let idx: usize = head
                            .strip_prefix("head")
                            .and_then(|s| s.parse().ok())
                            .expect("head tensor name");
                        let h = &apn.heads[idx];
                        match parts.next().unwrap() {
                            "query" => mat(&h.query),
                            "key" => mat(&h.key),
                            "value" => mat(&h.value),
                            other => unreachable!("unknown head field {other}"),
                        }
                    }
                }
            }
            other => unreachable!("unknown tensor scope {other}"),
        }
    }

    /// Rebuilds params + vocabulary from a checkpoint, validating every
    /// dimension against the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vocabulary), CheckpointError> {
        let need = |key: &str| {
            ckpt.meta_usize(key)
                .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
        };
        let config = ModelConfig {
            embed_dim: need("embed_dim")?,
            dim: need("dim")?,
            num_heads: need("num_heads")?,
            key_dim: need("key_dim")?,
            value_dim: need("value_dim")?,
            user_dim: need("user_dim")?,
            func_dim: need("func_dim")?,
            history_len: need("history_len")?,
            max_seq_len: need("max_seq_len")?,
            min_term_count: need("min_term_count")?,
        };
        let vocab = Vocabulary::from_terms(ckpt.vocab_terms.clone());
        let personalized = need("personalized")? == 1;
        let num_users = need("num_users")?;

        let take_matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix, CheckpointError> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if t.shape != [rows, cols] {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: alloc::vec![rows, cols],
                    found: t.shape.clone(),
                });
            }
            Ok(Matrix::from_vec(rows, cols, t.data.clone()))
        };
        let take_vec = |name: &str, len: usize| -> Result<Vec<f64>, CheckpointError> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if t.shape != [len] {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: alloc::vec![len],
                    found: t.shape.clone(),
                });
            }
            Ok(t.data.clone())
        };

        let vocab_size = vocab.len();
        let load_encoder = |prefix: &str| -> Result<EncoderParams, CheckpointError> {
            // the d used on disk must match the config's d
            let w2 = ckpt
                .tensor(&format!("{prefix}.w2"))
                .ok_or_else(|| CheckpointError::MissingTensor(format!("{prefix}.w2")))?;
            if w2.shape.get(1).copied() != Some(config.dim) {
                return Err(CheckpointError::DimMismatch {
                    expected: config.dim,
                    found: w2.shape.get(1).copied().unwrap_or(0),
                });
            }
            Ok(EncoderParams {
                token_embedding: take_matrix(
                    &format!("{prefix}.token_embedding"),
                    vocab_size,
                    config.embed_dim,
                )?,
                segment_embedding: take_matrix(
                    &format!("{prefix}.segment_embedding"),
                    2,
                    config.embed_dim,
                )?,
                w1: take_matrix(&format!("{prefix}.w1"), config.embed_dim, config.dim)?,
                b1: take_vec(&format!("{prefix}.b1"), config.dim)?,
                w2: take_matrix(&format!("{prefix}.w2"), config.dim, config.dim)?,
                b2: take_vec(&format!("{prefix}.b2"), config.dim)?,
            })
        };

        let request_encoder = load_encoder("request")?;
        let item_encoder = load_encoder("item")?;

        let apn = if personalized {
            let dims = config.apn_dims();
            let mut heads = Vec::with_capacity(config.num_heads);
            for j in 0..config.num_heads {
                heads.push(HeadParams {
                    query: take_matrix(&format!("apn.head{j}.query"), config.dim, config.key_dim)?,
                    key: take_matrix(&format!("apn.head{j}.key"), config.dim, config.key_dim)?,
                    value: take_matrix(&format!("apn.head{j}.value"), config.dim, config.value_dim)?,
                });
            }
            Some(ApnParams {
                dims,
                heads,
                ln_gain: take_vec("apn.ln_gain", config.dim)?,
                ln_bias: take_vec("apn.ln_bias", config.dim)?,
                user_embedding: take_matrix("apn.user_embedding", num_users + 1, config.user_dim)?,
                functionality_embedding: take_matrix(
                    "apn.functionality_embedding",
                    3,
                    config.func_dim,
                )?,
                fusion_w: take_matrix(
                    "apn.fusion_w",
                    config.dim + config.user_dim + config.func_dim,
                    config.dim,
                )?,
                fusion_b: take_vec("apn.fusion_b", config.dim)?,
                adapter_w1: take_matrix("apn.adapter_w1", config.dim, config.dim)?,
                adapter_b1: take_vec("apn.adapter_b1", config.dim)?,
                adapter_w2: take_matrix("apn.adapter_w2", config.dim, config.dim)?,
                adapter_b2: take_vec("apn.adapter_b2", config.dim)?,
            })
        } else {
            None
        };

        Ok((
            ModelParams {
                config,
                request_encoder,
                item_encoder,
                apn,
            },
            vocab,
        ))
    }
}

/// Parameters plus everything needed to run them: the vocabulary and the
/// user-key-to-embedding-row mapping assigned at fine-tuning time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    /// Key of the user behind each user-embedding row; empty before
    /// fine-tuning. The fallback row is not listed.
    pub user_keys: Vec<String>,
}

impl ModelBundle {
    pub fn new(params: ModelParams, vocab: Vocabulary) -> Self {
        ModelBundle {
            params,
            vocab,
            user_keys: Vec::new(),
        }
    }

    /// Embedding row of a user, when the user was seen at fine-tuning time.
    /// Anonymous interactions never resolve.
    pub fn user_row(&self, user: &Option<String>) -> Option<usize> {
        let key = user.as_ref()?;
        self.user_keys.iter().position(|k| k == key)
    }

    pub fn to_checkpoint(&self, stage: &str) -> Checkpoint {
        let mut ckpt = self.params.to_checkpoint(&self.vocab, stage);
        ckpt.user_keys = self.user_keys.clone();
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let (params, vocab) = ModelParams::from_checkpoint(ckpt)?;
        Ok(ModelBundle {
            params,
            vocab,
            user_keys: ckpt.user_keys.clone(),
        })
    }
}

/// Gradient buffers matching [`ModelParams`] tensor for tensor.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub request_encoder: EncoderGrads,
    pub item_encoder: EncoderGrads,
    pub apn: Option<ApnGrads>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            request_encoder: EncoderGrads::zeros_like(&params.request_encoder),
            item_encoder: EncoderGrads::zeros_like(&params.item_encoder),
            apn: params.apn.as_ref().map(ApnGrads::zeros_like),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        collect_encoder_grads(&self.request_encoder, "request", &mut out);
        collect_encoder_grads(&self.item_encoder, "item", &mut out);
        if let Some(apn) = &self.apn {
            collect_apn_grads(apn, &mut out);
        }
        out
    }
}

macro_rules! push_tensor {
    ($out:ident, $name:expr, $slice:expr) => {
        $out.push(($name.to_string(), $slice));
    };
}

fn collect_encoder<'a>(e: &'a EncoderParams, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
    push_tensor!(out, format!("{prefix}.token_embedding"), e.token_embedding.data());
    push_tensor!(out, format!("{prefix}.segment_embedding"), e.segment_embedding.data());
    push_tensor!(out, format!("{prefix}.w1"), e.w1.data());
    push_tensor!(out, format!("{prefix}.b1"), e.b1.as_slice());
    push_tensor!(out, format!("{prefix}.w2"), e.w2.data());
    push_tensor!(out, format!("{prefix}.b2"), e.b2.as_slice());
}

fn collect_encoder_mut<'a>(
    e: &'a mut EncoderParams,
    prefix: &str,
    out: &mut Vec<(String, &'a mut [f64])>,
) {
    push_tensor!(out, format!("{prefix}.token_embedding"), e.token_embedding.data_mut());
    push_tensor!(out, format!("{prefix}.segment_embedding"), e.segment_embedding.data_mut());
    push_tensor!(out, format!("{prefix}.w1"), e.w1.data_mut());
    push_tensor!(out, format!("{prefix}.b1"), e.b1.as_mut_slice());
    push_tensor!(out, format!("{prefix}.w2"), e.w2.data_mut());
    push_tensor!(out, format!("{prefix}.b2"), e.b2.as_mut_slice());
}

fn collect_encoder_grads<'a>(
    e: &'a EncoderGrads,
    prefix: &str,
    out: &mut Vec<(String, &'a [f64])>,
) {
    push_tensor!(out, format!("{prefix}.token_embedding"), e.token_embedding.data());
    push_tensor!(out, format!("{prefix}.segment_embedding"), e.segment_embedding.data());
    push_tensor!(out, format!("{prefix}.w1"), e.w1.data());
    push_tensor!(out, format!("{prefix}.b1"), e.b1.as_slice());
    push_tensor!(out, format!("{prefix}.w2"), e.w2.data());
    push_tensor!(out, format!("{prefix}.b2"), e.b2.as_slice());
}

macro_rules! push_apn_tail {
    ($apn:ident, $out:ident) => {
        push_tensor!($out, "apn.ln_gain", $apn.ln_gain.as_slice());
        push_tensor!($out, "apn.ln_bias", $apn.ln_bias.as_slice());
        push_tensor!($out, "apn.user_embedding", $apn.user_embedding.data());
        push_tensor!($out, "apn.functionality_embedding", $apn.functionality_embedding.data());
        push_tensor!($out, "apn.fusion_w", $apn.fusion_w.data());
        push_tensor!($out, "apn.fusion_b", $apn.fusion_b.as_slice());
        push_tensor!($out, "apn.adapter_w1", $apn.adapter_w1.data());
        push_tensor!($out, "apn.adapter_b1", $apn.adapter_b1.as_slice());
        push_tensor!($out, "apn.adapter_w2", $apn.adapter_w2.data());
        push_tensor!($out, "apn.adapter_b2", $apn.adapter_b2.as_slice());
    };
}

fn collect_apn_params<'a>(apn: &'a ApnParams, out: &mut Vec<(String, &'a [f64])>) {
    for (j, h) in apn.heads.iter().enumerate() {
        push_tensor!(out, format!("apn.head{j}.query"), h.query.data());
        push_tensor!(out, format!("apn.head{j}.key"), h.key.data());
        push_tensor!(out, format!("apn.head{j}.value"), h.value.data());
    }
    push_apn_tail!(apn, out);
}

fn collect_apn_params_mut<'a>(apn: &'a mut ApnParams, out: &mut Vec<(String, &'a mut [f64])>) {
    for (j, h) in apn.heads.iter_mut().enumerate() {
        push_tensor!(out, format!("apn.head{j}.query"), h.query.data_mut());
        push_tensor!(out, format!("apn.head{j}.key"), h.key.data_mut());
        push_tensor!(out, format!("apn.head{j}.value"), h.value.data_mut());
    }
    push_tensor!(out, "apn.ln_gain", apn.ln_gain.as_mut_slice());
    push_tensor!(out, "apn.ln_bias", apn.ln_bias.as_mut_slice());
    push_tensor!(out, "apn.user_embedding", apn.user_embedding.data_mut());
    push_tensor!(out, "apn.functionality_embedding", apn.functionality_embedding.data_mut());
    push_tensor!(out, "apn.fusion_w", apn.fusion_w.data_mut());
    push_tensor!(out, "apn.fusion_b", apn.fusion_b.as_mut_slice());
    push_tensor!(out, "apn.adapter_w1", apn.adapter_w1.data_mut());
    push_tensor!(out, "apn.adapter_b1", apn.adapter_b1.as_mut_slice());
    push_tensor!(out, "apn.adapter_w2", apn.adapter_w2.data_mut());
    push_tensor!(out, "apn.adapter_b2", apn.adapter_b2.as_mut_slice());
}

fn collect_apn_grads<'a>(apn: &'a ApnGrads, out: &mut Vec<(String, &'a [f64])>) {
    for (j, h) in apn.heads.iter().enumerate() {
        push_tensor!(out, format!("apn.head{j}.query"), h.query.data());
        push_tensor!(out, format!("apn.head{j}.key"), h.key.data());
        push_tensor!(out, format!("apn.head{j}.value"), h.value.data());
    }
    push_apn_tail!(apn, out);
}
