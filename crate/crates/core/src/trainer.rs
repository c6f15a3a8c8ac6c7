//! Gradient descent on the composite loss with the token embeddings
//! themselves as the trainable parameters.
//!
//! Each step re-scores the batch, re-selects the positive set (unless the
//! selection is frozen), computes the configured losses, applies an SGD or
//! momentum update, and re-normalizes every embedding back onto the unit
//! sphere (projected gradient descent). Detection losses are driven by
//! synthetic predicted points — each target token's ground-truth centroid
//! plus a trainable offset — and by a similarity-based classification head,
//! so the full weighted sum is exercised end to end.
//!
//! A component loss is only computed when its weight is nonzero, so runs
//! that differ solely in a zero-weighted component produce identical traces.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_norm, normalize};
use crate::error::{Error, Result};
use crate::losses::{
    cls_loss, loc_loss, modified_sup_con_loss, sup_con_loss, two_class_positive_sets, LossConfig,
    LossReport,
};
use crate::selection::{select_positives, selection_accuracy, SelectionStrategy};
use crate::synthworld::{Scenario, ScenarioQuery};
use crate::Point;

/// Divergence bound on the composite loss value.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Scale of the random initial point offsets, in scene units.
const OFFSET_INIT_SCALE: f64 = 2.0;

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum with coefficient beta in [0, 1).
    SgdMomentum(f64),
}

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastiveKind {
    /// Unmodified supervised contrastive loss over the two pseudo-classes:
    /// every token anchors on the rest of its own side, so I- coheres too.
    Standard,
    /// Positives-only anchors: only I+ members anchor, negatives appear in
    /// denominators only.
    Modified,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Step size. Zero is allowed and makes training a no-op, which is
    /// useful for probing the loss surface without moving it.
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: LossConfig,
    /// Selection strategy; its `n_ground_truth` is overridden with the
    /// trained query's N.
    pub selection: SelectionStrategy,
    /// Reuse the step-0 partition for the whole run.
    pub freeze_selection: bool,
    /// Seeds the random initial point offsets.
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd,
            loss: LossConfig::default(),
            selection: SelectionStrategy::new(crate::selection::SelectionVariant::TopN, 0),
            freeze_selection: false,
            seed: 0,
            log_interval: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be a finite non-negative real, got {}",
                self.learning_rate
            )));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidConfig("log interval must be positive".into()));
        }
        if let Optimizer::SgdMomentum(beta) = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!(
                    "momentum beta must lie in [0, 1), got {beta}"
                )));
            }
        }
        self.loss.validate()
    }
}

/// One logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Composite loss value at this step, before the update.
    pub loss: f64,
    pub anchors_used: usize,
    pub selection_accuracy: f64,
    /// Mean pairwise cosine within I+ (0 when fewer than two members).
    pub intra_positive_cosine: f64,
    /// Mean cosine over (I+, I-) pairs (0 when either side is empty).
    pub positive_negative_cosine: f64,
    /// Mean pairwise cosine within I- (0 when fewer than two members).
    pub intra_negative_cosine: f64,
    /// intra_positive_cosine - positive_negative_cosine.
    pub margin: f64,
}

/// The result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    /// Records ordered by step; step 0 and the final step are always
    /// present.
    pub records: Vec<TraceRecord>,
    /// The scenario with its token embeddings replaced by the trained ones
    /// (canonical labels, not query-relative).
    pub final_scenario: Scenario,
    /// Predicted point per token after training: ground truth plus trained
    /// offset for the query's targets, the untouched centroid for other
    /// real tokens, `None` for background.
    pub final_points: Vec<Option<Point>>,
    /// Set when the loss exceeded the divergence bound or became
    /// non-finite; the records then form a partial trace.
    pub diverged: bool,
}

impl TrainTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace always has records")
    }

    pub fn initial_record(&self) -> &TraceRecord {
        self.records.first().expect("trace always has records")
    }
}

/// Paired traces from identical initial conditions, differing only in the
/// contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossComparison {
    pub standard: TrainTrace,
    pub modified: TrainTrace,
}

fn mean_pairwise_cosine(unit: &[Vec<f64>], indices: &[usize]) -> f64 {
    if indices.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            total += dot(&unit[i], &unit[j]);
            count += 1;
        }
    }
    total / count as f64
}

fn mean_cross_cosine(unit: &[Vec<f64>], left: &[usize], right: &[usize]) -> f64 {
    if left.is_empty() || right.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in left {
        for &j in right {
            total += dot(&unit[i], &unit[j]);
        }
    }
    total / (left.len() * right.len()) as f64
}

/// Train on one query with the modified (positives-only-anchor) objective.
pub fn train(scenario: &Scenario, query: &ScenarioQuery, config: &TrainConfig) -> Result<TrainTrace> {
    run(scenario, query, config, ContrastiveKind::Modified)
}

/// Run the standard two-class objective and the modified objective from
/// identical initial conditions and seeds, differing only in the loss.
pub fn compare_losses(
    scenario: &Scenario,
    query: &ScenarioQuery,
    config: &TrainConfig,
) -> Result<LossComparison> {
    Ok(LossComparison {
        standard: run(scenario, query, config, ContrastiveKind::Standard)?,
        modified: run(scenario, query, config, ContrastiveKind::Modified)?,
    })
}

fn run(
    scenario: &Scenario,
    query: &ScenarioQuery,
    config: &TrainConfig,
    kind: ContrastiveKind,
) -> Result<TrainTrace> {
    config.validate()?;
    let mut batch = scenario.batch_for_query(query);
    let n = batch.len();
    let dim = batch.dim();
    if query.embedding.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: query.embedding.dim(),
        });
    }
    let strategy = config.selection.with_n(query.n_ground_truth);
    let cfg = &config.loss;
    let query_unit = normalize(query.embedding.values())?;

    let labels: Vec<bool> = batch
        .labels()
        .expect("scenario batches carry labels")
        .iter()
        .map(|l| l.is_target)
        .collect();

    // Localization head: targets of the query with a centroid each get a
    // trainable offset; predicted point = centroid + offset.
    let loc_tokens: Vec<usize> = (0..n)
        .filter(|&i| labels[i] && scenario.points[i].is_some())
        .collect();
    let loc_targets: Vec<Point> = loc_tokens
        .iter()
        .map(|&i| scenario.points[i].expect("filtered to Some"))
        .collect();
    let loc_assignment: Vec<(usize, usize)> = (0..loc_tokens.len()).map(|i| (i, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut offsets: Vec<Point> = (0..loc_tokens.len())
        .map(|_| {
            [
                OFFSET_INIT_SCALE * rng.sample::<f64, _>(StandardNormal),
                OFFSET_INIT_SCALE * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();

    let mut velocity_embed = vec![vec![0.0; dim]; n];
    let mut velocity_offsets = vec![[0.0f64; 2]; loc_tokens.len()];

    let mut partition = select_positives(&batch, &query.embedding, &strategy)?;
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut diverged = false;

    for step in 0..=config.steps {
        if step > 0 && !config.freeze_selection {
            partition = select_positives(&batch, &query.embedding, &strategy)?;
        }

        let contrastive = if cfg.lambda_c > 0.0 {
            match kind {
                ContrastiveKind::Modified => modified_sup_con_loss(&partition, &batch, cfg)?,
                ContrastiveKind::Standard => {
                    let sets = two_class_positive_sets(&partition, n);
                    sup_con_loss(&batch, &sets, cfg)?
                }
            }
        } else {
            LossReport::zeros(0, 0)
        };

        let loc = if cfg.lambda_loc > 0.0 && !loc_tokens.is_empty() {
            let predicted: Vec<Point> = loc_tokens
                .iter()
                .zip(&offsets)
                .map(|(&i, o)| {
                    let g = scenario.points[i].expect("loc tokens have centroids");
                    [g[0] + o[0], g[1] + o[1]]
                })
                .collect();
            loc_loss(&predicted, &loc_targets, &loc_assignment)?
        } else {
            LossReport::zeros(0, 0)
        };

        // Classification head on the same embeddings: logit for the
        // positive class is the query similarity over tau, background 0.
        let unit: Vec<Vec<f64>> = batch
            .tokens()
            .iter()
            .map(|t| {
                if cfg.normalize_inputs {
                    normalize(t.values())
                } else {
                    Ok(t.values().to_vec())
                }
            })
            .collect::<Result<_>>()?;
        let cls = if cfg.lambda_cls > 0.0 {
            let logits: Vec<Vec<f64>> = unit
                .iter()
                .map(|u| vec![dot(u, &query_unit) / cfg.temperature, 0.0])
                .collect();
            let cls_labels: Vec<usize> = labels.iter().map(|&t| usize::from(!t)).collect();
            cls_loss(&logits, &cls_labels)?
        } else {
            LossReport::zeros(0, 0)
        };

        let value =
            cfg.lambda_loc * loc.value + cfg.lambda_cls * cls.value + cfg.lambda_c * contrastive.value;

        if !value.is_finite() || value > DIVERGENCE_BOUND {
            diverged = true;
            break;
        }

        if step % config.log_interval == 0 || step == config.steps {
            let intra_positive = mean_pairwise_cosine(&unit, partition.positives());
            let intra_negative = mean_pairwise_cosine(&unit, partition.negatives());
            let cross = mean_cross_cosine(&unit, partition.positives(), partition.negatives());
            records.push(TraceRecord {
                step,
                loss: value,
                anchors_used: contrastive.anchors_used,
                selection_accuracy: selection_accuracy(&partition, &batch)?,
                intra_positive_cosine: intra_positive,
                positive_negative_cosine: cross,
                intra_negative_cosine: intra_negative,
                margin: intra_positive - cross,
            });
        }

        if step == config.steps {
            break;
        }

        // Embedding gradient: contrastive plus the classification chain
        // d(logit)/d(z) = q / tau (projected through the normalization when
        // the losses normalize internally).
        let mut grad_embed = vec![vec![0.0; dim]; n];
        if cfg.lambda_c > 0.0 {
            for (g, c) in grad_embed.iter_mut().zip(&contrastive.gradients) {
                for (gi, ci) in g.iter_mut().zip(c) {
                    *gi += cfg.lambda_c * ci;
                }
            }
        }
        if cfg.lambda_cls > 0.0 {
            for (i, g) in grad_embed.iter_mut().enumerate() {
                let coef = cfg.lambda_cls * cls.gradients[i][0] / cfg.temperature;
                if cfg.normalize_inputs {
                    let radial = dot(&unit[i], &query_unit);
                    let scale = l2_norm(batch.tokens()[i].values());
                    for ((gi, qi), ui) in g.iter_mut().zip(&query_unit).zip(&unit[i]) {
                        *gi += coef * (qi - radial * ui) / scale;
                    }
                } else {
                    for (gi, qi) in g.iter_mut().zip(&query_unit) {
                        *gi += coef * qi;
                    }
                }
            }
        }

        let lr = config.learning_rate;
        let mut renorm_failed = false;
        for i in 0..n {
            let step_vec: &[f64] = match config.optimizer {
                Optimizer::Sgd => &grad_embed[i],
                Optimizer::SgdMomentum(beta) => {
                    for (v, g) in velocity_embed[i].iter_mut().zip(&grad_embed[i]) {
                        *v = beta * *v + g;
                    }
                    &velocity_embed[i]
                }
            };
            // A token with no effective step keeps its exact bits; avoids
            // re-normalization churn when nothing moved.
            if step_vec.iter().all(|&g| lr * g == 0.0) {
                continue;
            }
            let updated: Vec<f64> = batch.tokens()[i]
                .values()
                .iter()
                .zip(step_vec)
                .map(|(z, g)| z - lr * g)
                .collect();
            match normalize(&updated) {
                Ok(u) => batch.set_token_values(i, &u)?,
                Err(_) => {
                    renorm_failed = true;
                    break;
                }
            }
        }
        if renorm_failed {
            diverged = true;
            break;
        }

        if cfg.lambda_loc > 0.0 {
            for (j, off) in offsets.iter_mut().enumerate() {
                let g = &loc.gradients[j];
                let step_vec: [f64; 2] = match config.optimizer {
                    Optimizer::Sgd => [g[0], g[1]],
                    Optimizer::SgdMomentum(beta) => {
                        velocity_offsets[j][0] = beta * velocity_offsets[j][0] + g[0];
                        velocity_offsets[j][1] = beta * velocity_offsets[j][1] + g[1];
                        velocity_offsets[j]
                    }
                };
                off[0] -= lr * cfg.lambda_loc * step_vec[0];
                off[1] -= lr * cfg.lambda_loc * step_vec[1];
            }
        }
    }

    if records.is_empty() {
        // Divergence before the first log point still yields a trace shell.
        return Err(Error::DivergenceDetected { step: 0 });
    }

    let mut final_scenario = scenario.clone();
    for i in 0..n {
        final_scenario
            .batch
            .set_token_values(i, batch.tokens()[i].values())?;
    }
    let mut final_points = scenario.points.clone();
    for (j, &i) in loc_tokens.iter().enumerate() {
        let g = scenario.points[i].expect("loc tokens have centroids");
        final_points[i] = Some([g[0] + offsets[j][0], g[1] + offsets[j][1]]);
    }

    Ok(TrainTrace {
        records,
        final_scenario,
        final_points,
        diverged,
    })
}
