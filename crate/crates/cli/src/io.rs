//! JSONL wire formats and binary artifact IO.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use uia_core::corpus::{
    EsciJudgment, EsciLabel, Functionality, Interaction, InteractionLog, Item, ItemCollection,
    Request, RequestPayload,
};
use uia_core::synth::World;

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    item_id: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PayloadRecord {
    kind: String,
    value: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InteractionRecord {
    user_id: Option<String>,
    timestamp: u64,
    functionality: u8,
    payload: PayloadRecord,
    clicked_item_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EsciRecord {
    query: String,
    item_id: String,
    label: String,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

/// Loads an item collection from a jsonl file; malformed lines are reported
/// with their line number.
pub fn load_items(path: &Path) -> Result<ItemCollection> {
    let mut items = Vec::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ItemRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed item line", path.display(), no + 1))?;
        items.push(Item {
            item_id: record.item_id,
            text: record.text,
        });
    }
    ItemCollection::from_items(items).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn save_items(path: &Path, items: &ItemCollection) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for item in items.iter() {
        let record = ItemRecord {
            item_id: item.item_id.clone(),
            text: item.text.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

fn payload_to_record(payload: &RequestPayload) -> PayloadRecord {
    match payload {
        RequestPayload::QueryText(q) => PayloadRecord {
            kind: "query".to_string(),
            value: q.clone(),
        },
        RequestPayload::AnchorItem(id) => PayloadRecord {
            kind: "anchor".to_string(),
            value: id.clone(),
        },
    }
}

fn record_to_payload(record: PayloadRecord, line: usize, path: &Path) -> Result<RequestPayload> {
    match record.kind.as_str() {
        "query" => Ok(RequestPayload::QueryText(record.value)),
        "anchor" => Ok(RequestPayload::AnchorItem(record.value)),
        other => bail!(
            "{}:{}: unknown payload kind {other:?} (expected \"query\" or \"anchor\")",
            path.display(),
            line
        ),
    }
}

/// Loads and normalizes an interaction log (grouping, sorting, timestamp
/// re-indexing happen in the core constructor).
pub fn load_interactions(path: &Path, items: &ItemCollection) -> Result<InteractionLog> {
    let mut raw = Vec::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: InteractionRecord = serde_json::from_str(line).with_context(|| {
            format!("{}:{}: malformed interaction line", path.display(), no + 1)
        })?;
        let functionality = Functionality::from_id(record.functionality)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), no + 1))?;
        raw.push(Interaction {
            user_id: record.user_id,
            timestamp: record.timestamp,
            request: Request {
                functionality,
                payload: record_to_payload(record.payload, no + 1, path)?,
            },
            clicked_item_id: record.clicked_item_id,
        });
    }
    InteractionLog::from_interactions(raw, items)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

pub fn save_interactions(path: &Path, log: &InteractionLog) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for inter in log.iter() {
        let record = InteractionRecord {
            user_id: inter.user_id.clone(),
            timestamp: inter.timestamp,
            functionality: inter.request.functionality.id(),
            payload: payload_to_record(&inter.request.payload),
            clicked_item_id: inter.clicked_item_id.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// Loads ESCI-style judgments.
pub fn load_esci(path: &Path) -> Result<Vec<EsciJudgment>> {
    let mut judgments = Vec::new();
    for (no, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EsciRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed judgment line", path.display(), no + 1))?;
        let label = EsciLabel::from_letter(&record.label)
            .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), no + 1))?;
        judgments.push(EsciJudgment {
            query: record.query,
            item_id: record.item_id,
            label,
        });
    }
    Ok(judgments)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum TruthRecord {
    #[serde(rename = "item")]
    Item {
        item_id: String,
        category: usize,
        style: usize,
    },
    #[serde(rename = "complement")]
    Complement {
        category: usize,
        complements: Vec<usize>,
    },
    #[serde(rename = "user")]
    User {
        user_id: String,
        preferences: Vec<f64>,
        style: usize,
    },
}

/// Writes the synthetic world's latent structure for oracle-based checks.
pub fn save_ground_truth(path: &Path, world: &World) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (ord, item) in world.items.iter().enumerate() {
        let record = TruthRecord::Item {
            item_id: item.item_id.clone(),
            category: world.truth.item_category[ord],
            style: world.truth.item_style[ord],
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    for (category, comps) in world.truth.complements.iter().enumerate() {
        let record = TruthRecord::Complement {
            category,
            complements: comps.iter().copied().collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    for (u, prefs) in world.truth.user_preferences.iter().enumerate() {
        let record = TruthRecord::User {
            user_id: format!("u{u:03}"),
            preferences: prefs.clone(),
            style: world.truth.user_style[u],
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// Train/valid/test interaction indices as a json document.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn save_split(path: &Path, split: &uia_core::corpus::DatasetSplit) -> Result<()> {
    let file = SplitFile {
        train: split.train.clone(),
        valid: split.valid.clone(),
        test: split.test.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<uia_core::corpus::DatasetSplit> {
    let file: SplitFile = serde_json::from_str(&fs::read_to_string(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(uia_core::corpus::DatasetSplit {
        train: file.train,
        valid: file.valid,
        test: file.test,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}
