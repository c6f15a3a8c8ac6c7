//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by embedding construction, selection, losses, metrics,
/// scenario generation, and training.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A vector with zero (or underflowing) L2 norm cannot be normalized
    /// or scored.
    #[error("vector has zero norm (all entries zero or norm < 1e-30)")]
    ZeroVector,

    /// Two vectors that must share a dimension do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An entry was NaN or infinite where finite values are required.
    #[error("non-finite value encountered")]
    NonFinite,

    /// A batch that must hold at least one token is empty.
    #[error("token batch is empty")]
    EmptyBatch,

    /// The label list does not line up with the token list.
    #[error("label count {labels} does not match token count {tokens}")]
    LabelLengthMismatch { tokens: usize, labels: usize },

    /// An operation that needs ground-truth labels was given a batch
    /// without them.
    #[error("batch carries no ground-truth labels")]
    MissingLabels,

    /// Contrastive losses require a strictly positive temperature.
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),

    /// Contrastive losses need at least two tokens.
    #[error("batch of size {size} is too small (need at least {min})")]
    BatchTooSmall { size: usize, min: usize },

    /// A per-anchor positive set referenced the anchor itself or an
    /// out-of-range index.
    #[error("invalid positive set for anchor {anchor}")]
    InvalidPositiveSet { anchor: usize },

    /// A classification label was outside the logit range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Component loss reports cannot be combined because their gradient
    /// lists have different shapes.
    #[error("gradient shape mismatch between composite components")]
    GradientShapeMismatch,

    /// A metric over counts was given an empty list.
    #[error("metric input is empty")]
    EmptyInput,

    /// Grouping by attribute category requires every pair to carry one.
    #[error("count pair '{instance_id}' has no attribute category")]
    MissingCategory { instance_id: String },

    /// The scenario spec cannot be realized (placement, geometry, or
    /// dimensionality constraints).
    #[error("infeasible scenario spec: {0}")]
    InfeasibleSpec(String),

    /// Sweep axis name not recognized.
    #[error("unknown sweep axis '{0}'")]
    UnknownAxis(String),

    /// Batch exceeds the detection query budget.
    #[error("batch size {size} exceeds max queries {max}")]
    BatchExceedsMaxQueries { size: usize, max: usize },

    /// A configuration value violates an invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training aborted because the loss exceeded the divergence bound
    /// or became non-finite. The partial trace is preserved on the
    /// returned `TrainTrace` via its `diverged` flag; this variant is
    /// surfaced only where no trace exists to carry the flag.
    #[error("training diverged at step {step}")]
    DivergenceDetected { step: usize },

    /// Filesystem failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(String),

    /// JSON or CSV (de)serialization failure; the message carries the
    /// line/field diagnostic where the format provides one.
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
