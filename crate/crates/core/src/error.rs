use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("validation error in row `{row}`: {message}")]
    Validation { row: String, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("token id {id} is outside the vocabulary (size {size})")]
    UnknownTokenId { id: usize, size: usize },

    #[error("sequence of {len} tokens exceeds max_position {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("invalid config value for `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("malformed checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("gold labels missing for ids: {}", ids.join(", "))]
    MissingGold { ids: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for validation and schema problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::Io { .. } | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
