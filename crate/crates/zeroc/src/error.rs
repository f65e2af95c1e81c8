use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum ZcError {
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("sampler error at step {step}: {msg}")]
    Sampler { step: usize, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("channel error: {0}")]
    Channel(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ZcError>;
