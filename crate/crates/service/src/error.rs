use std::path::PathBuf;

use thiserror::Error;
use vcbot_core::CoreError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("missing {what}: {} does not exist", path.display())]
    Missing { what: &'static str, path: PathBuf },

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),

    #[error("websocket: {0}")]
    WebSocket(String),

    #[error("worker failed: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
