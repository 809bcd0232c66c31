use thiserror::Error;

/// Crate-wide error type. Library code returns `Result<T>`; the CLI wraps
/// these in `anyhow` for reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("dataset has no labels but the operation requires them")]
    MissingLabels,

    #[error("paired batches have mismatched lengths: {left} vs {right}")]
    PairingMismatch { left: usize, right: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("input is not a point of the finite world")]
    NotAWorldPoint,

    #[error("hypothesis class is empty")]
    EmptyClass,

    #[error("training diverged: non-finite {component} at epoch {epoch}, step {step}")]
    TrainDiverged {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
