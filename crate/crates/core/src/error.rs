use larl_tensor::TensorError;

/// Failures raised by the dialog-model library.
#[derive(Debug, thiserror::Error)]
pub enum LarlError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("environment: {0}")]
    Env(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LarlError> = std::result::Result<T, E>;
