use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LookError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LookError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("point ({x}, {y}) is outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("similarity undefined for a zero vector")]
    ZeroVector,

    #[error("duplicate product id `{0}`")]
    DuplicateProduct(String),

    #[error("mining failed: {0}")]
    Mining(String),

    #[error("no evaluable class (every class has zero ground truth)")]
    NoEvaluableClass,

    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),

    #[error("candidate `{0}` was already reviewed")]
    AlreadyReviewed(String),

    #[error("candidate `{candidate}` is leased to `{holder}`")]
    LeasedToOther { candidate: String, holder: String },

    #[error("lease on candidate `{0}` has expired")]
    LeaseExpired(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("correction references unknown image `{0}`")]
    UnknownImage(String),

    #[error("could not decode image {path}: {reason}")]
    Decode { path: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("request failed: {0}")]
    Request(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LookError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LookError::Io {
            path: path.into(),
            source,
        }
    }
}
