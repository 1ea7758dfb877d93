//! On-disk records: mined manifest, score dumps, and evaluation reports.
//!
//! Everything is line-delimited JSON with fixed field names; floats go
//! through serde_json's shortest-roundtrip formatting, so identical values
//! always serialize to identical bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::ScoreRecord;
use crate::embed::SimilarityRow;
use crate::encoder::CropBox;
use crate::metrics::EvalResult;
use crate::{Error, Float, Result};

/// One mined-set entry; `label` is present only for d_in records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedRecord {
    pub source_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub crop_box: CropBox,
    pub sim: f64,
    pub embedding_offset: usize,
}

/// One score-dump line; `label` is present only for labeled (ID) samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDumpRecord {
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub s_in: Vec<f64>,
    pub s_out: Vec<f64>,
    pub score_idlike: f64,
    pub score_mcm: f64,
    pub score_msp: f64,
    pub predicted_class: usize,
}

impl ScoreDumpRecord {
    pub fn from_record<T: Float>(record: &ScoreRecord<T>, label: Option<usize>) -> Self {
        let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
        Self {
            sample_id: record.sample_id.clone(),
            label,
            s_in: record.sim_row.id_sims().iter().map(|&x| f(x)).collect(),
            s_out: record.sim_row.ood_sims().iter().map(|&x| f(x)).collect(),
            score_idlike: f(record.score_idlike),
            score_mcm: f(record.score_mcm),
            score_msp: f(record.score_msp),
            predicted_class: record.predicted_class,
        }
    }

    /// Rebuild the similarity row for metric recomputation.
    pub fn sim_row(&self) -> Result<SimilarityRow<f64>> {
        SimilarityRow::new(self.s_in.clone(), self.s_out.clone())
    }
}

/// One report line; the final line carries `ood_set = "average"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ood_set: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

pub fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::MissingFile(path.display().to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| Error::MalformedFile {
                path: path.display().to_string(),
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Average row over per-set results: metric fields are arithmetic means,
/// `n_id` is shared, `n_ood` totals.
pub fn average_row(rows: &[ReportRow]) -> Option<ReportRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(ReportRow {
        ood_set: "average".to_string(),
        result: EvalResult {
            fpr_at_95: rows.iter().map(|r| r.result.fpr_at_95).sum::<f64>() / n,
            auroc: rows.iter().map(|r| r.result.auroc).sum::<f64>() / n,
            id_acc: rows.iter().map(|r| r.result.id_acc).sum::<f64>() / n,
            n_id: rows[0].result.n_id,
            n_ood: rows.iter().map(|r| r.result.n_ood).sum(),
        },
    })
}

/// Human-readable summary table.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>10} {:>10} {:>10} {:>8} {:>8}\n",
        "ood_set", "fpr_at_95", "auroc", "id_acc", "n_id", "n_ood"
    ));
    out.push_str(&"-".repeat(68));
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>8}\n",
            row.ood_set,
            row.result.fpr_at_95,
            row.result.auroc,
            row.result.id_acc,
            row.result.n_id,
            row.result.n_ood
        ));
    }
    out
}
