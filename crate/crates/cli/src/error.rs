use patchlab_forge::ForgeError;
use patchlab_sae::SaeError;
use patchlab_sweep::SweepError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    /// A failure inside one reproduce-all stage.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 4,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Stage { source, .. } => source.kind(),
        }
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        let stage = match self {
            CliError::Stage { stage, .. } => Some(stage.as_str()),
            _ => None,
        };
        json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "stage": stage,
                "message": self.to_string(),
            }
        })
        .to_string()
    }

    pub fn in_stage(self, stage: &str) -> Self {
        CliError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

impl From<patchlab_core::Error> for CliError {
    fn from(e: patchlab_core::Error) -> Self {
        use patchlab_core::Error as E;
        match e {
            E::Config(_)
            | E::Plan(_)
            | E::Address(_)
            | E::UnknownSymbol(_)
            | E::SequenceTooLong { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ForgeError> for CliError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Core(c) => c.into(),
            ForgeError::Pair(..) | ForgeError::Spec(_) | ForgeError::TrainConfig(_) => {
                CliError::Config(e.to_string())
            }
            ForgeError::Diverged { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SweepError> for CliError {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::Core(c) => c.into(),
            SweepError::Forge(f) => f.into(),
            SweepError::Spec(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SaeError> for CliError {
    fn from(e: SaeError) -> Self {
        match e {
            SaeError::Core(c) => c.into(),
            SaeError::Config(_) | SaeError::Dim { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
