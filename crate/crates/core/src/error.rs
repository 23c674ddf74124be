use taco_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("capacity exceeded: allocation of {requested} bytes over the {limit}-byte budget")]
    Capacity { requested: usize, limit: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at step {step} (episode {episode})")]
    NonFiniteLoss { step: u64, episode: u64 },
    #[error("state is not fitted")]
    NotFitted,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
