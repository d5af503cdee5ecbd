use thiserror::Error;

#[derive(Error, Debug)]
pub enum DissError {
    #[error("invalid {name}: {reason}")]
    InvalidRange { name: &'static str, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("numeric divergence at step {step}: {detail}")]
    NumericDivergence { step: usize, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DissError> = std::result::Result<T, E>;

impl DissError {
    pub(crate) fn range(name: &'static str, reason: impl Into<String>) -> Self {
        DissError::InvalidRange {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        DissError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
