use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Core(#[from] patchlab_core::Error),

    #[error(transparent)]
    Forge(#[from] patchlab_forge::ForgeError),

    #[error("invalid sweep spec: {0}")]
    Spec(String),

    #[error("cannot write {path}: {source}")]
    Write {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = SweepError> = std::result::Result<T, E>;
