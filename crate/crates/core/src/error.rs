use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("unsupported input size {height}x{width}: {required}")]
    UnsupportedSize {
        height: usize,
        width: usize,
        required: String,
    },

    #[error("mask is empty")]
    EmptyMask,

    #[error("text is empty")]
    EmptyText,

    #[error("{requested} anchors requested but the grid only has {available} cells")]
    TooManyAnchors { requested: usize, available: usize },

    #[error("backend error ({}): {message}", if *.retryable { "retryable" } else { "fatal" })]
    Backend { message: String, retryable: bool },

    #[error("every training step was skipped")]
    AllStepsSkipped,

    #[error("every candidate edit failed")]
    AllCandidatesFailed,

    #[error("malformed parameter blob: {0}")]
    Format(String),
}

impl Error {
    pub fn backend(message: impl Into<String>, retryable: bool) -> Self {
        Error::Backend {
            message: message.into(),
            retryable,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Backend { retryable: true, .. })
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. })
    }
}
