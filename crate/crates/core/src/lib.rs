//! Core algorithms for a contrastive counting laboratory.
//!
//! The crate implements the full pipeline on abstract embedding spaces:
//! scoring candidate tokens against an expression embedding, pseudo-label
//! top-N selection into positive/negative classes, supervised contrastive
//! losses (standard and positives-only-anchor) with analytic gradients,
//! detection losses, threshold-based counting, point-matching evaluation
//! metrics, a seeded synthetic scenario generator, and a small trainer that
//! optimizes the token embeddings themselves.

pub mod detection;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod report;
pub mod selection;
pub mod synthworld;
pub mod trainer;

/// A 2-D point in scene units.
pub type Point = [f64; 2];

pub use embedding::{
    cosine, cosine_similarity, normalize, ExpressionEmbedding, QueryKind, TokenBatch,
    TokenEmbedding, TokenLabel,
};
pub use error::{Error, Result};
pub use losses::{
    cls_loss, composite_loss, finite_difference_gradient, loc_loss, modified_sup_con_loss,
    sup_con_loss, LossConfig, LossReport,
};
pub use metrics::{
    f1, grouped_report, mae, match_points, rmse, CountPair, F1Score, GroupRow, Grouping,
    PointMatchResult,
};
pub use selection::{
    resolve, score_batch, select_positives, selection_accuracy, selection_f1, PartitionedBatch,
    SelectionStrategy, SelectionVariant,
};
pub use synthworld::{generate, sweep, ClassSpec, Scenario, ScenarioQuery, ScenarioSpec, SweepAxis};
pub use trainer::{
    compare_losses, train, ContrastiveKind, LossComparison, Optimizer, TraceRecord, TrainConfig,
    TrainTrace,
};

pub use detection::{detect, Detections, ThresholdConfig};
