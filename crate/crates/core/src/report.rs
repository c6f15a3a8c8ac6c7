//! CSV and JSON emission for traces, ablations, sweeps, and run manifests.
//!
//! CSV files optionally begin with a `# generated-at <unix-seconds>` comment
//! line; suppressing it (the `--no-timestamp` flag) makes repeated runs with
//! the same seed byte-identical. Floats are rendered with Rust's shortest
//! round-trip formatting, which is deterministic.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{
    AblateLossRow, AblateSelectionRow, Evaluation, EvaluationRow, SweepRow, TrainSummary,
};
use crate::metrics::GroupRow;
use crate::trainer::TrainTrace;

/// Output formatting switches shared by every writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputOptions {
    /// Write the timestamp comment line at the top of CSV files and the
    /// timestamp field in manifests.
    pub timestamp: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { timestamp: true }
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Render header + string records as CSV bytes, with the optional
/// timestamp comment line.
pub fn csv_bytes(
    header: &[&str],
    records: &[Vec<String>],
    options: &OutputOptions,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if options.timestamp {
        out.extend_from_slice(format!("# generated-at {}\n", unix_now()).as_bytes());
    }
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header)?;
    for record in records {
        writer.write_record(record)?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Serialize any value as pretty JSON (trailing newline included).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Per-run provenance record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: String, seed: u64, options: &OutputOptions) -> Self {
        Self {
            version: 1,
            command: command.to_string(),
            config_sha256,
            seed,
            crate_version: env!("CARGO_PKG_VERSION"),
            generated_at: options.timestamp.then(unix_now),
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_json(path, manifest)
}

/// Trace CSV: one row per logged step.
pub fn trace_csv_bytes(trace: &TrainTrace, options: &OutputOptions) -> Result<Vec<u8>> {
    let header = [
        "step",
        "loss",
        "anchors_used",
        "selection_accuracy",
        "intra_positive_cosine",
        "positive_negative_cosine",
        "intra_negative_cosine",
        "margin",
    ];
    let records: Vec<Vec<String>> = trace
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.loss),
                r.anchors_used.to_string(),
                fmt_f64(r.selection_accuracy),
                fmt_f64(r.intra_positive_cosine),
                fmt_f64(r.positive_negative_cosine),
                fmt_f64(r.intra_negative_cosine),
                fmt_f64(r.margin),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

pub fn write_trace_csv(path: &Path, trace: &TrainTrace, options: &OutputOptions) -> Result<()> {
    write_file(path, &trace_csv_bytes(trace, options)?)
}

pub fn write_train_summary(path: &Path, summary: &TrainSummary) -> Result<()> {
    write_json(path, summary)
}

/// Loss-ablation CSV: one row per objective.
pub fn ablate_loss_csv_bytes(rows: &[AblateLossRow], options: &OutputOptions) -> Result<Vec<u8>> {
    let header = [
        "variant",
        "final_loss",
        "final_selection_accuracy",
        "intra_positive_cosine",
        "positive_negative_cosine",
        "intra_negative_cosine",
        "margin",
        "diverged",
    ];
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.to_string(),
                fmt_f64(r.final_loss),
                fmt_f64(r.final_selection_accuracy),
                fmt_f64(r.intra_positive_cosine),
                fmt_f64(r.positive_negative_cosine),
                fmt_f64(r.intra_negative_cosine),
                fmt_f64(r.margin),
                r.diverged.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

/// Selection-ablation CSV: one row per strategy.
pub fn ablate_selection_csv_bytes(
    rows: &[AblateSelectionRow],
    options: &OutputOptions,
) -> Result<Vec<u8>> {
    let header = [
        "strategy",
        "resolved_k",
        "final_selection_accuracy",
        "final_selection_f1",
        "final_loss",
        "margin",
        "diverged",
    ];
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                r.resolved_k.to_string(),
                fmt_f64(r.final_selection_accuracy),
                fmt_f64(r.final_selection_f1),
                fmt_f64(r.final_loss),
                fmt_f64(r.margin),
                r.diverged.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

/// Per-query evaluation CSV.
pub fn evaluation_csv_bytes(rows: &[EvaluationRow], options: &OutputOptions) -> Result<Vec<u8>> {
    let header = [
        "instance_id",
        "class",
        "attribute",
        "n_ground_truth",
        "predicted_count",
        "precision",
        "recall",
        "f1",
        "match_threshold",
    ];
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.instance_id.clone(),
                r.class.to_string(),
                r.attribute.map_or_else(|| "-".to_string(), |a| a.to_string()),
                r.n_ground_truth.to_string(),
                r.predicted_count.to_string(),
                fmt_f64(r.precision),
                fmt_f64(r.recall),
                fmt_f64(r.f1),
                fmt_f64(r.match_threshold),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

/// Grouped-metrics CSV (count-range or attribute grouping).
pub fn grouped_csv_bytes(rows: &[GroupRow], options: &OutputOptions) -> Result<Vec<u8>> {
    let header = ["group", "mae", "rmse", "n"];
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                fmt_f64(r.mae),
                fmt_f64(r.rmse),
                r.n.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

/// Sweep CSV: one row per swept scenario, input order.
pub fn sweep_csv_bytes(rows: &[SweepRow], options: &OutputOptions) -> Result<Vec<u8>> {
    let header = [
        "axis",
        "value",
        "seed",
        "n_ground_truth",
        "predicted_count",
        "abs_error",
        "final_loss",
        "final_selection_accuracy",
        "final_selection_f1",
        "final_margin",
        "detection_f1",
        "diverged",
    ];
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.axis.clone(),
                fmt_f64(r.value),
                r.seed.to_string(),
                r.n_ground_truth.to_string(),
                r.predicted_count.to_string(),
                r.abs_error.to_string(),
                fmt_f64(r.final_loss),
                fmt_f64(r.final_selection_accuracy),
                fmt_f64(r.final_selection_f1),
                fmt_f64(r.final_margin),
                fmt_f64(r.detection_f1),
                r.diverged.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &records, options)
}

/// Full evaluation output: summary JSON plus per-query and grouped CSVs.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, options: &OutputOptions) -> Result<()> {
    write_json(&dir.join("metrics.json"), eval)?;
    write_file(
        &dir.join("per_query.csv"),
        &evaluation_csv_bytes(&eval.rows, options)?,
    )?;
    write_file(
        &dir.join("by_count_range.csv"),
        &grouped_csv_bytes(&eval.by_count_range, options)?,
    )?;
    write_file(
        &dir.join("by_attribute.csv"),
        &grouped_csv_bytes(&eval.by_attribute, options)?,
    )
}

/// Write raw bytes produced by one of the `*_csv_bytes` helpers.
pub fn write_csv_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_suppression_controls_comment_line() {
        let rows = vec![vec!["a".to_string(), "1".to_string()]];
        let with = csv_bytes(&["col", "val"], &rows, &OutputOptions { timestamp: true }).unwrap();
        let without =
            csv_bytes(&["col", "val"], &rows, &OutputOptions { timestamp: false }).unwrap();
        assert!(String::from_utf8(with).unwrap().starts_with("# generated-at "));
        assert_eq!(
            String::from_utf8(without).unwrap(),
            "col,val\na,1\n"
        );
    }

    #[test]
    fn float_formatting_round_trips() {
        let v = 0.1 + 0.2;
        let s = fmt_f64(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
    }
}
