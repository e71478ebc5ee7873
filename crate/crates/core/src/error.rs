use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error("address out of range: {0}")]
    Address(String),

    #[error("invalid patch plan: {0}")]
    Plan(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("digest mismatch: header says {expected}, payload hashes to {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
