use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown modulation scheme `{0}`")]
    UnknownModulation(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
