use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CapeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CapeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("duplicate token {token:?} at line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("non-finite value {value} at row {row}, column {column}")]
    NonFinite { row: usize, column: usize, value: f64 },

    #[error("size mismatch: {what} has {actual} entries, expected {expected}")]
    SizeMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("no stored logits for prompt {prompt_sha256} at position {position}")]
    MissingRecord { prompt_sha256: String, position: usize },

    #[error("provider bound to a different vocabulary: {0}")]
    Binding(String),

    #[error("at position {position}: {source}")]
    AtPosition {
        position: usize,
        #[source]
        source: Box<CapeError>,
    },

    #[error("prompt {prompt_id}: {source}")]
    AtPrompt {
        prompt_id: u64,
        #[source]
        source: Box<CapeError>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CapeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CapeError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CapeError::Format { path: path.into(), message: message.into() }
    }

    /// True for failures that originate in a logit/tokenizer provider,
    /// including those wrapped with position context.
    pub fn is_provider_error(&self) -> bool {
        match self {
            CapeError::Provider(_) | CapeError::Binding(_) | CapeError::MissingRecord { .. } => true,
            CapeError::AtPosition { source, .. } | CapeError::AtPrompt { source, .. } => source.is_provider_error(),
            _ => false,
        }
    }
}
