use thiserror::Error;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error(transparent)]
    Core(#[from] patchlab_core::Error),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },

    #[error("invalid SAE config: {0}")]
    Config(String),

    #[error("non-finite loss at step {0}")]
    NanLoss(usize),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = SaeError> = std::result::Result<T, E>;
