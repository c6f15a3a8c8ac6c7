//! Experiment orchestration: composite configuration, evaluation against
//! ground truth, loss/selection ablations, and deterministic parameter
//! sweeps.
//!
//! Everything here is driven by one versioned [`ExperimentConfig`] document.
//! Sweeps fan out across a rayon pool, one scenario per worker, and results
//! are merged back in input order, so a fixed seed reproduces results
//! byte for byte regardless of thread count.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{detect, ThresholdConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    f1_from_counts, grouped_report, mae, match_points, rmse, CountPair, GroupRow, Grouping,
};
use crate::selection::{resolve, selection_f1, SelectionStrategy, SelectionVariant};
use crate::synthworld::{generate, ScenarioSpec, SweepAxis};
use crate::trainer::{compare_losses, train, ContrastiveKind, TrainConfig, TrainTrace};
use crate::synthworld::{Scenario, ScenarioQuery};
use crate::Point;

/// Current experiment-config document version.
pub const CONFIG_VERSION: u32 = 1;

/// Metric evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Point-matching distance threshold. `None` derives a per-scene
    /// default: half the nearest-neighbor ground-truth spacing, floored at
    /// 0.5 scene units.
    pub match_threshold: Option<f64>,
}

impl MetricOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.match_threshold {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "match_threshold must be a positive real, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Sweep request: which spec parameter to vary and over which values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub values: Vec<f64>,
}

/// The composite configuration document every command consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
    pub thresholds: ThresholdConfig,
    pub metrics: MetricOptions,
    pub sweep: Option<SweepSection>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            scenario: ScenarioSpec::default(),
            train: TrainConfig::default(),
            thresholds: ThresholdConfig::default(),
            metrics: MetricOptions::default(),
            sweep: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Validate every nested invariant.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.scenario.validate()?;
        self.train.validate()?;
        self.thresholds.validate()?;
        self.metrics.validate()?;
        if let Some(sweep) = &self.sweep {
            let axis: SweepAxis = sweep.axis.parse()?;
            for &v in &sweep.values {
                axis.apply(&self.scenario, v)?;
            }
        }
        Ok(())
    }

    /// Parse and validate a config document. Unknown keys are rejected and
    /// parse errors keep serde_json's line/column diagnostic.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, for the run manifest.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-scene default matching threshold: half the nearest-neighbor spacing
/// among the ground-truth points, floored at 0.5 scene units.
pub fn default_match_threshold(ground_truth: &[Point]) -> f64 {
    let mut nearest = f64::INFINITY;
    for i in 0..ground_truth.len() {
        for j in (i + 1)..ground_truth.len() {
            let dx = ground_truth[i][0] - ground_truth[j][0];
            let dy = ground_truth[i][1] - ground_truth[j][1];
            nearest = nearest.min((dx * dx + dy * dy).sqrt());
        }
    }
    if nearest.is_finite() {
        (0.5 * nearest).max(0.5)
    } else {
        0.5
    }
}

/// Evaluation of one query against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub instance_id: String,
    pub class: usize,
    pub attribute: Option<usize>,
    pub n_ground_truth: usize,
    pub predicted_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub match_threshold: f64,
}

/// Full evaluation report over every query of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub rows: Vec<EvaluationRow>,
    pub mae: f64,
    pub rmse: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub by_count_range: Vec<GroupRow>,
    pub by_attribute: Vec<GroupRow>,
}

fn attribute_category(query: &ScenarioQuery) -> String {
    match query.attribute {
        Some(a) => format!("attr-{a}"),
        None => "class-only".to_string(),
    }
}

/// Evaluate one query of a scenario: detect, count, and point-match.
///
/// `points` supplies the predicted location per token (a trained run passes
/// its `final_points`; plain evaluation uses the scenario centroids).
/// Detections without a location count as unmatched false positives.
fn evaluate_query(
    scenario: &Scenario,
    points: &[Option<Point>],
    query: &ScenarioQuery,
    thresholds: &ThresholdConfig,
    metric_options: &MetricOptions,
) -> Result<EvaluationRow> {
    let batch = scenario.batch_for_query(query);
    let class_query = scenario
        .class_query(query.class)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("scenario has no class query for class {}", query.class))
        })?
        .embedding
        .clone();
    let detections = detect(&batch, &query.embedding, &class_query, thresholds)?;

    let gt_points = scenario.target_points(query);
    let threshold = metric_options
        .match_threshold
        .unwrap_or_else(|| default_match_threshold(&gt_points));

    let mut predicted_points = Vec::new();
    let mut pointless_detections = 0usize;
    for &i in &detections.indices {
        match points[i] {
            Some(p) => predicted_points.push(p),
            None => pointless_detections += 1,
        }
    }
    let matched = match_points(&predicted_points, &gt_points, threshold)?;
    let score = f1_from_counts(
        matched.matched.len(),
        matched.unmatched_predictions.len() + pointless_detections,
        matched.unmatched_ground_truths.len(),
    );

    Ok(EvaluationRow {
        instance_id: batch.instance_id().to_string(),
        class: query.class,
        attribute: query.attribute,
        n_ground_truth: query.n_ground_truth,
        predicted_count: detections.predicted_count,
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
        match_threshold: threshold,
    })
}

/// Evaluate every query of a scenario against its ground truth.
pub fn evaluate_scenario(
    scenario: &Scenario,
    thresholds: &ThresholdConfig,
    metric_options: &MetricOptions,
) -> Result<Evaluation> {
    let rows: Vec<EvaluationRow> = scenario
        .queries
        .iter()
        .map(|q| evaluate_query(scenario, &scenario.points, q, thresholds, metric_options))
        .collect::<Result<_>>()?;

    let pairs: Vec<CountPair> = scenario
        .queries
        .iter()
        .zip(&rows)
        .map(|(q, r)| CountPair {
            ground_truth: r.n_ground_truth as u64,
            predicted: r.predicted_count as u64,
            instance_id: r.instance_id.clone(),
            attribute_category: Some(attribute_category(q)),
        })
        .collect();

    let count = rows.len() as f64;
    Ok(Evaluation {
        mae: mae(&pairs)?,
        rmse: rmse(&pairs)?,
        mean_precision: rows.iter().map(|r| r.precision).sum::<f64>() / count,
        mean_recall: rows.iter().map(|r| r.recall).sum::<f64>() / count,
        mean_f1: rows.iter().map(|r| r.f1).sum::<f64>() / count,
        by_count_range: grouped_report(&pairs, Grouping::CountRange)?,
        by_attribute: grouped_report(&pairs, Grouping::AttributeCategory)?,
        rows,
    })
}

/// One side of the loss ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateLossRow {
    pub variant: &'static str,
    pub final_loss: f64,
    pub final_selection_accuracy: f64,
    pub intra_positive_cosine: f64,
    pub positive_negative_cosine: f64,
    pub intra_negative_cosine: f64,
    pub margin: f64,
    pub diverged: bool,
}

fn ablate_loss_row(variant: &'static str, trace: &TrainTrace) -> AblateLossRow {
    let r = trace.final_record();
    AblateLossRow {
        variant,
        final_loss: r.loss,
        final_selection_accuracy: r.selection_accuracy,
        intra_positive_cosine: r.intra_positive_cosine,
        positive_negative_cosine: r.positive_negative_cosine,
        intra_negative_cosine: r.intra_negative_cosine,
        margin: r.margin,
        diverged: trace.diverged,
    }
}

/// Paired rows for the standard versus modified contrastive objective on
/// one query, trained from identical initial conditions.
pub fn ablate_loss(
    scenario: &Scenario,
    query_index: usize,
    config: &TrainConfig,
) -> Result<Vec<AblateLossRow>> {
    let query = scenario
        .queries
        .get(query_index)
        .ok_or_else(|| Error::InvalidConfig(format!("query index {query_index} out of range")))?;
    let cmp = compare_losses(scenario, query, config)?;
    Ok(vec![
        ablate_loss_row("sup", &cmp.standard),
        ablate_loss_row("sup-star", &cmp.modified),
    ])
}

/// One row of the selection-count ablation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblateSelectionRow {
    pub strategy: String,
    pub resolved_k: usize,
    pub final_selection_accuracy: f64,
    pub final_selection_f1: f64,
    pub final_loss: f64,
    pub margin: f64,
    pub diverged: bool,
}

/// The four ablated strategies, in the canonical reporting order.
pub fn ablation_strategies(fixed_k: usize) -> Vec<(String, SelectionVariant)> {
    vec![
        ("topn".to_string(), SelectionVariant::TopN),
        (format!("top-fixed-{fixed_k}"), SelectionVariant::TopFixed(fixed_k)),
        ("topn-sqrt".to_string(), SelectionVariant::TopNPlusSqrt),
        ("topn-2log".to_string(), SelectionVariant::TopNPlusTwoLog),
    ]
}

/// Train one query under each selection strategy and report the final
/// selection quality. All runs share the seed and initial conditions.
pub fn ablate_selection(
    scenario: &Scenario,
    query_index: usize,
    config: &TrainConfig,
    fixed_k: usize,
) -> Result<Vec<AblateSelectionRow>> {
    let query = scenario
        .queries
        .get(query_index)
        .ok_or_else(|| Error::InvalidConfig(format!("query index {query_index} out of range")))?;
    let mut rows = Vec::new();
    for (label, variant) in ablation_strategies(fixed_k) {
        let strategy = SelectionStrategy::new(variant, query.n_ground_truth);
        let run_config = TrainConfig {
            selection: strategy,
            ..config.clone()
        };
        let trace = train(scenario, query, &run_config)?;
        let final_batch = trace.final_scenario.batch_for_query(query);
        let partition = crate::selection::select_positives(
            &final_batch,
            &query.embedding,
            &strategy,
        )?;
        let record = trace.final_record();
        rows.push(AblateSelectionRow {
            strategy: label,
            resolved_k: resolve(&strategy),
            final_selection_accuracy: record.selection_accuracy,
            final_selection_f1: selection_f1(&partition, &final_batch)?,
            final_loss: record.loss,
            margin: record.margin,
            diverged: trace.diverged,
        });
    }
    Ok(rows)
}

/// One row of a sweep: a scenario trained on its first attribute query and
/// evaluated at the final state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub n_ground_truth: usize,
    pub predicted_count: usize,
    pub abs_error: u64,
    pub final_loss: f64,
    pub final_selection_accuracy: f64,
    pub final_selection_f1: f64,
    pub final_margin: f64,
    pub detection_f1: f64,
    pub diverged: bool,
}

fn sweep_one(
    spec_value: f64,
    scenario: &Scenario,
    config: &ExperimentConfig,
) -> Result<SweepRow> {
    let axis = config
        .sweep
        .as_ref()
        .expect("sweep_one called with sweep section")
        .axis
        .clone();
    let query = scenario.queries[0].clone();
    let trace = train(scenario, &query, &config.train)?;
    let final_scenario = &trace.final_scenario;

    let strategy = config.train.selection.with_n(query.n_ground_truth);
    let final_batch = final_scenario.batch_for_query(&query);
    let partition =
        crate::selection::select_positives(&final_batch, &query.embedding, &strategy)?;

    let eval = evaluate_query(
        final_scenario,
        &trace.final_points,
        &query,
        &config.thresholds,
        &config.metrics,
    )?;

    let record = trace.final_record();
    Ok(SweepRow {
        axis,
        value: spec_value,
        seed: scenario.spec.seed,
        n_ground_truth: query.n_ground_truth,
        predicted_count: eval.predicted_count,
        abs_error: (eval.predicted_count as i64 - query.n_ground_truth as i64).unsigned_abs(),
        final_loss: record.loss,
        final_selection_accuracy: record.selection_accuracy,
        final_selection_f1: selection_f1(&partition, &final_batch)?,
        final_margin: record.margin,
        detection_f1: eval.f1,
        diverged: trace.diverged,
    })
}

/// Run the configured sweep: one scenario per value, trained and evaluated
/// in parallel, rows returned in input order.
pub fn sweep_rows(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let section = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("config has no sweep section".into()))?;
    let axis: SweepAxis = section.axis.parse()?;
    let scenarios: Vec<(f64, Scenario)> = section
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut spec = axis.apply(&config.scenario, value)?;
            spec.seed = config.scenario.seed.wrapping_add(i as u64);
            Ok((value, generate(&spec)?))
        })
        .collect::<Result<_>>()?;

    scenarios
        .par_iter()
        .map(|(value, scenario)| sweep_one(*value, scenario, config))
        .collect()
}

/// Summary statistics the trainer emits next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: u32,
    pub final_margin: f64,
    pub final_selection_accuracy: f64,
    pub steps: usize,
    pub divergence_flag: bool,
    pub final_loss: f64,
}

impl TrainSummary {
    pub fn from_trace(trace: &TrainTrace, steps: usize) -> Self {
        let r = trace.final_record();
        Self {
            version: 1,
            final_margin: r.margin,
            final_selection_accuracy: r.selection_accuracy,
            steps,
            divergence_flag: trace.diverged,
            final_loss: r.loss,
        }
    }
}

/// Contrastive kind label used in reports.
pub fn kind_label(kind: ContrastiveKind) -> &'static str {
    match kind {
        ContrastiveKind::Standard => "sup",
        ContrastiveKind::Modified => "sup-star",
    }
}
