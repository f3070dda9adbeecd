//! Report rendering: JSON documents, aligned text tables, and TSV.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use uia_core::corpus::Functionality;
use uia_core::eval::MetricReport;

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportDocument {
    pub per_functionality: BTreeMap<String, FunctionalityEntry>,
    pub per_user_ndcg: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FunctionalityEntry {
    pub mrr_at_10: f64,
    pub ndcg_at_10: f64,
    pub recall_at_50: f64,
    pub query_count: usize,
}

pub fn to_document(report: &MetricReport) -> ReportDocument {
    let per_functionality = report
        .per_functionality
        .iter()
        .map(|(f, s)| {
            (
                f.name().to_string(),
                FunctionalityEntry {
                    mrr_at_10: s.mrr,
                    ndcg_at_10: s.ndcg,
                    recall_at_50: s.recall,
                    query_count: s.query_count,
                },
            )
        })
        .collect();
    ReportDocument {
        per_functionality,
        per_user_ndcg: report.per_user_ndcg(),
    }
}

/// Aligned plain-text metrics table.
pub fn to_text_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>10} {:>10} {:>10} {:>8}\n",
        "func", "MRR@10", "NDCG@10", "Recall@50", "queries"
    ));
    for f in Functionality::ALL {
        if let Some(s) = report.per_functionality.get(&f) {
            out.push_str(&format!(
                "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>8}\n",
                f.name(),
                s.mrr,
                s.ndcg,
                s.recall,
                s.query_count
            ));
        }
    }
    out
}

/// Per-user NDCG delta TSV between two report documents (`a - b`), sorted
/// by descending delta then user key.
pub fn delta_tsv_against(a: &ReportDocument, b: &ReportDocument) -> String {
    let users: BTreeSet<&String> = a.per_user_ndcg.keys().chain(b.per_user_ndcg.keys()).collect();
    let mut rows: Vec<(String, f64)> = users
        .into_iter()
        .map(|u| {
            let va = a.per_user_ndcg.get(u).copied().unwrap_or(0.0);
            let vb = b.per_user_ndcg.get(u).copied().unwrap_or(0.0);
            (u.clone(), va - vb)
        })
        .collect();
    rows.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let n = rows.len().max(1) as f64;
    let pos = rows.iter().filter(|(_, d)| *d > 0.0).count() as f64 / n;
    let zero = rows.iter().filter(|(_, d)| *d == 0.0).count() as f64 / n;
    let neg = rows.iter().filter(|(_, d)| *d < 0.0).count() as f64 / n;
    let mut out = String::from("user\tdelta_ndcg\n");
    for (user, d) in &rows {
        out.push_str(&format!("{user}\t{d:.6}\n"));
    }
    out.push_str(&format!(
        "#fractions\tpositive={pos:.4}\tzero={zero:.4}\tnegative={neg:.4}\n"
    ));
    out
}
