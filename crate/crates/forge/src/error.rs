use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Core(#[from] patchlab_core::Error),

    #[error("invalid operand pair {0}: {1}")]
    Pair(String, String),

    #[error("invalid task spec: {0}")]
    Spec(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    #[error("training diverged at step {step} (loss {loss}); try a lower learning rate")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;
