//! Error type shared by every pipeline stage.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by '{layer}'")]
    NonFinite { layer: String },

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("forward cache is stale: network changed since the pass was recorded")]
    StaleCache,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ROC is undefined: both classes must be present")]
    SingleClass,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("mask covers the entire image: no boundary data to inpaint from")]
    FullCoverageMask,

    #[error("insufficient training data: {0}")]
    InsufficientData(String),

    #[error("lesion placement failed after {attempts} rejection samples")]
    Generation { attempts: usize },

    #[error("unsupported or corrupt file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("PNG codec: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
