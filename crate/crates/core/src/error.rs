use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate primitive: {0}")]
    DegeneratePrimitive(String),

    #[error("grid is empty: {0}")]
    EmptyGrid(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time t={0} is outside (0, 1]")]
    InvalidTime(f64),

    #[error("condition inconsistent with library")]
    ConditionInconsistent,

    #[error("responsibilities underflowed for every component")]
    ResponsibilityUnderflow,

    #[error("contacts cannot complement vision: hidden surface is empty")]
    EmptyHiddenSurface,

    #[error("requested {requested} points but only {available} are available")]
    NotEnoughPoints { requested: usize, available: usize },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point cloud has zero extent")]
    ZeroExtent,

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
