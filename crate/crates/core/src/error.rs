use std::path::PathBuf;

/// Errors produced anywhere in the training library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("sample index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty prediction history for sample {0}")]
    EmptyHistory(usize),

    #[error("noise-rate heuristic never triggered: final training error {final_train_error:.4} > tau {tau}")]
    HeuristicNotTriggered { final_train_error: f64, tau: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
