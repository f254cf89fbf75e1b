//! Label error rates with substitution/insertion/deletion breakdown,
//! pooled corpus scoring and CSV/JSON report tables.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S+I+D)/N`; may exceed 1. An empty reference counts as length 1.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }

    pub fn add(&mut self, other: &ErrorBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match,
    /// Reference label replaced by this hypothesis label.
    Substitute(usize),
    /// Hypothesis label with no reference counterpart.
    Insert(usize),
    Delete,
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// optimal paths the backtrace prefers substitution (or match), then
/// insertion, then deletion. Ops are in reference order.
pub fn edit_script(reference: &[usize], hyp: &[usize]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match
                } else {
                    EditOp::Substitute(hyp[j - 1])
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Insert(hyp[j - 1]));
            j -= 1;
        } else {
            ops.push(EditOp::Delete);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Applies an edit script to `reference`, yielding the hypothesis.
pub fn apply_script(reference: &[usize], ops: &[EditOp]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut r = reference.iter();
    for op in ops {
        match *op {
            EditOp::Match => out.push(*r.next().expect("script longer than reference")),
            EditOp::Substitute(y) => {
                r.next();
                out.push(y);
            }
            EditOp::Insert(y) => out.push(y),
            EditOp::Delete => {
                r.next();
            }
        }
    }
    out
}

pub fn edit_distance_breakdown(reference: &[usize], hyp: &[usize]) -> ErrorBreakdown {
    let mut b = ErrorBreakdown {
        ref_len: reference.len(),
        ..Default::default()
    };
    for op in edit_script(reference, hyp) {
        match op {
            EditOp::Match => {}
            EditOp::Substitute(_) => b.substitutions += 1,
            EditOp::Insert(_) => b.insertions += 1,
            EditOp::Delete => b.deletions += 1,
        }
    }
    b
}

/// One reference utterance with an optional grouping key (duration bucket,
/// repetition count, noise condition).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreItem {
    pub id: String,
    pub group: Option<String>,
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScore {
    pub total: ErrorBreakdown,
    /// Groups in order of first appearance.
    pub groups: Vec<(String, ErrorBreakdown)>,
}

/// Pools counts over all items, and within each group.
pub fn score_corpus(
    items: &[ScoreItem],
    hyps: &HashMap<String, Vec<usize>>,
) -> Result<CorpusScore> {
    let mut seen = HashSet::new();
    let mut total = ErrorBreakdown::default();
    let mut groups: Vec<(String, ErrorBreakdown)> = Vec::new();
    for item in items {
        if !seen.insert(item.id.as_str()) {
            return Err(Error::Contract(format!(
                "utterance {} scored twice",
                item.id
            )));
        }
        let hyp = hyps
            .get(&item.id)
            .ok_or_else(|| Error::MissingHypothesis(item.id.clone()))?;
        let b = edit_distance_breakdown(&item.reference, hyp);
        total.add(&b);
        if let Some(key) = &item.group {
            match groups.iter_mut().find(|(k, _)| k == key) {
                Some((_, acc)) => acc.add(&b),
                None => groups.push((key.clone(), b)),
            }
        }
    }
    Ok(CorpusScore { total, groups })
}

pub const REPORT_VERSION: u32 = 1;

/// One row of a report table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: String,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// Error rate in percent, rounded to two decimals.
    pub rate_pct: f64,
    pub wall_s: Option<f64>,
    /// Inference time relative to the model's first condition.
    pub time_ratio: Option<f64>,
}

impl ReportRow {
    pub fn new(model: &str, condition: &str, b: &ErrorBreakdown) -> Self {
        ReportRow {
            model: model.to_owned(),
            condition: condition.to_owned(),
            substitutions: b.substitutions,
            insertions: b.insertions,
            deletions: b.deletions,
            ref_len: b.ref_len,
            rate_pct: (b.rate() * 10_000.0).round() / 100.0,
            wall_s: None,
            time_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub version: u32,
    pub title: String,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "model",
    "condition",
    "substitutions",
    "insertions",
    "deletions",
    "ref_len",
    "rate_pct",
    "wall_s",
    "time_ratio",
];

/// Writes one table. CSV rates carry exactly two decimals.
pub fn emit_report(
    path: &Path,
    title: &str,
    rows: &[ReportRow],
    format: ReportFormat,
) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let table = ReportTable {
                version: REPORT_VERSION,
                title: title.to_owned(),
                rows: rows.to_vec(),
            };
            let text = serde_json::to_string_pretty(&table)?;
            fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(REPORT_COLUMNS)?;
            let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
            for r in rows {
                w.write_record([
                    r.model.clone(),
                    r.condition.clone(),
                    r.substitutions.to_string(),
                    r.insertions.to_string(),
                    r.deletions.to_string(),
                    r.ref_len.to_string(),
                    format!("{:.2}", r.rate_pct),
                    opt(r.wall_s),
                    opt(r.time_ratio),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_json_report(path: &Path) -> Result<ReportTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
