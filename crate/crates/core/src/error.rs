//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped by
//! failure class rather than by module so callers can match on the condition
//! they care about (e.g. a diverged training run) without knowing which layer
//! raised it.

/// Errors produced by channel generation, beam selection, dataset
/// construction, training, and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A channel matrix is too close to rank-deficient for the requested
    /// operation (e.g. fewer usable streams than requested).
    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    /// A beam selection references out-of-range or duplicate beam indices.
    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    /// Exhaustive enumeration would exceed the configured combination budget.
    #[error("enumeration budget exceeded: {count} combinations > budget {budget}")]
    BudgetExceeded { count: u128, budget: u128 },

    /// A training loss became non-finite.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// Every weak learner in an ensemble failed to train.
    #[error("ensemble training failed: {0}")]
    EnsembleFailed(String),

    /// A mixture component collapsed onto a single point and could not be
    /// recovered by reinitialisation.
    #[error("mixture component collapsed: {0}")]
    ComponentCollapse(String),

    /// A configuration file is syntactically valid but semantically wrong.
    #[error("config error: {0}")]
    Config(String),

    /// A binary artifact has a bad magic number, unsupported version, or a
    /// payload inconsistent with its header.
    #[error("format error: {0}")]
    Format(String),

    /// Two artifacts that must agree (e.g. checkpoint and dataset) do not.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidArgument`] with a formatted message.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
