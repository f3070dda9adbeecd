//! Workspace directory conventions and artifact validation.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use uia_core::checkpoint::Checkpoint;
use uia_core::index::DenseIndex;
use uia_core::model::ModelBundle;

/// Pipeline stages that produce a checkpoint.
pub const STAGES: [&str; 3] = ["pretrain1", "pretrain2", "finetune"];

/// All artifact paths hang off one workspace directory so pipeline stages
/// chain without repeating paths.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn items(&self) -> PathBuf {
        self.root.join("items.jsonl")
    }

    pub fn interactions(&self) -> PathBuf {
        self.root.join("interactions.jsonl")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("truth.jsonl")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn lexical(&self) -> PathBuf {
        self.root.join("lexical.idx")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(format!("ckpt_{stage}.bin"))
    }

    pub fn dense_index(&self, stage: &str) -> PathBuf {
        self.root.join(format!("index_{stage}.idx"))
    }

    pub fn negatives(&self, source: &str) -> PathBuf {
        self.root.join(format!("negatives_{source}.jsonl"))
    }

    pub fn report_json(&self, name: &str) -> PathBuf {
        self.root.join(format!("report_{name}.json"))
    }

    pub fn report_text(&self, name: &str) -> PathBuf {
        self.root.join(format!("report_{name}.txt"))
    }

    pub fn user_delta_tsv(&self, name: &str) -> PathBuf {
        self.root.join(format!("delta_{name}.tsv"))
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("uia.cfg")
    }

    /// The workspace config file when present, else none.
    pub fn default_config(&self) -> Option<PathBuf> {
        let path = self.config_file();
        path.exists().then_some(path)
    }

    pub fn require(&self, path: &Path, hint: &str) -> Result<(), MissingArtifact> {
        if path.exists() {
            Ok(())
        } else {
            Err(MissingArtifact {
                path: path.to_path_buf(),
                hint: hint.to_string(),
            })
        }
    }

    pub fn load_bundle(&self, stage: &str) -> anyhow::Result<(ModelBundle, Checkpoint)> {
        let path = self.checkpoint(stage);
        let bytes = crate::io::read_bytes(&path)?;
        let ckpt = Checkpoint::from_bytes(&bytes)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        let bundle = ModelBundle::from_checkpoint(&ckpt)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok((bundle, ckpt))
    }

    pub fn load_index(&self, stage: &str, expected_dim: Option<usize>) -> anyhow::Result<DenseIndex> {
        let path = self.dense_index(stage);
        let bytes = crate::io::read_bytes(&path)?;
        DenseIndex::from_bytes(&bytes, expected_dim)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }
}

/// A prerequisite artifact is absent (exit code 3).
#[derive(Debug)]
pub struct MissingArtifact {
    pub path: PathBuf,
    pub hint: String,
}

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "missing prerequisite artifact {} ({})",
            self.path.display(),
            self.hint
        )
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Debug, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub present: Vec<String>,
    pub missing: Vec<String>,
    pub problems: Vec<String>,
}

/// Checks artifact presence, header validity, and provenance-tag
/// consistency across checkpoint/index pairs. Problems are reported, not
/// raised.
pub fn validate_workspace(ws: &Workspace) -> ValidationReport {
    let mut present = Vec::new();
    let mut missing = Vec::new();
    let mut problems = Vec::new();

    let mut check = |path: PathBuf| -> bool {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if path.exists() {
            present.push(name);
            true
        } else {
            missing.push(name);
            false
        }
    };

    check(ws.items());
    check(ws.interactions());
    check(ws.split());
    check(ws.ground_truth());
    if check(ws.lexical()) {
        if let Ok(bytes) = crate::io::read_bytes(&ws.lexical()) {
            if let Err(e) = uia_core::lexical::LexicalIndex::from_bytes(&bytes) {
                problems.push(format!("lexical.idx: {e}"));
            }
        }
    }

    for stage in STAGES {
        let ckpt_path = ws.checkpoint(stage);
        let idx_path = ws.dense_index(stage);
        let have_ckpt = check(ckpt_path.clone());
        let have_idx = check(idx_path.clone());
        if !have_ckpt {
            continue;
        }
        let ckpt = match crate::io::read_bytes(&ckpt_path)
            .map_err(|e| e.to_string())
            .and_then(|b| Checkpoint::from_bytes(&b).map_err(|e| e.to_string()))
        {
            Ok(c) => c,
            Err(e) => {
                problems.push(format!("ckpt_{stage}.bin: {e}"));
                continue;
            }
        };
        if ckpt.meta.get("stage").map(String::as_str) != Some(stage) {
            problems.push(format!(
                "ckpt_{stage}.bin: stage metadata {:?} does not match its filename",
                ckpt.meta.get("stage")
            ));
        }
        if have_idx {
            match crate::io::read_bytes(&idx_path)
                .map_err(|e| e.to_string())
                .and_then(|b| DenseIndex::from_bytes(&b, None).map_err(|e| e.to_string()))
            {
                Ok(index) => {
                    let tag = ckpt.hash_tag();
                    if index.tag() != tag {
                        problems.push(format!(
                            "index_{stage}.idx tag {} does not match checkpoint hash {tag}",
                            index.tag()
                        ));
                    }
                }
                Err(e) => problems.push(format!("index_{stage}.idx: {e}")),
            }
        }
    }

    ValidationReport {
        ok: problems.is_empty(),
        present,
        missing,
        problems,
    }
}
