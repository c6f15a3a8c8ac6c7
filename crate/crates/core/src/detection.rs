//! Threshold-based detection: turn similarity scores into positive
//! detections and a predicted count.
//!
//! Cosine scores in [-1, 1] are mapped to [0, 1] via (y + 1) / 2 so the
//! absolute thresholds apply on a fixed scale; this is a documented scale
//! adaptation, not a reproduction of a grounding head's logits. A token is
//! a positive detection only when it clears the class-query threshold and
//! the expression-query threshold simultaneously.

use serde::{Deserialize, Serialize};

use crate::embedding::{ExpressionEmbedding, TokenBatch};
use crate::error::{Error, Result};
use crate::selection::score_batch;

/// Detection thresholds and query budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Threshold on the class-query score, in [0, 1].
    pub cls_threshold: f64,
    /// Threshold on the expression-query score, in [0, 1].
    pub token_threshold: f64,
    /// Maximum batch size accepted for prediction.
    pub max_queries: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            cls_threshold: 0.30,
            token_threshold: 0.36,
            max_queries: 900,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("cls_threshold", self.cls_threshold),
            ("token_threshold", self.token_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) || !t.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {t}"
                )));
            }
        }
        if self.max_queries == 0 {
            return Err(Error::InvalidConfig("max_queries must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of positive detections plus the predicted count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detections {
    pub indices: Vec<usize>,
    pub predicted_count: usize,
}

/// Map a cosine score to the [0, 1] detection scale.
pub fn to_unit_scale(cosine: f64) -> f64 {
    (cosine.clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Detect positive tokens and count them.
///
/// A token passes iff its class-query score (mapped to [0, 1]) is at least
/// `cls_threshold` and its expression-query score is at least
/// `token_threshold`.
pub fn detect(
    batch: &TokenBatch,
    query: &ExpressionEmbedding,
    class_query: &ExpressionEmbedding,
    config: &ThresholdConfig,
) -> Result<Detections> {
    config.validate()?;
    if batch.len() > config.max_queries {
        return Err(Error::BatchExceedsMaxQueries {
            size: batch.len(),
            max: config.max_queries,
        });
    }
    let expr_scores = score_batch(batch, query)?;
    let cls_scores = score_batch(batch, class_query)?;
    let indices: Vec<usize> = (0..batch.len())
        .filter(|&i| {
            to_unit_scale(cls_scores[i]) >= config.cls_threshold
                && to_unit_scale(expr_scores[i]) >= config.token_threshold
        })
        .collect();
    let predicted_count = indices.len();
    Ok(Detections {
        indices,
        predicted_count,
    })
}
