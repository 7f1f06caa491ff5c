use thiserror::Error;

pub type Result<T> = std::result::Result<T, FflError>;

#[derive(Debug, Error)]
pub enum FflError {
    /// A configuration value failed validation. `key` names the offending entry.
    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Malformed binary input, e.g. a bad IDX header or a short read.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FflError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FflError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        FflError::InvalidInput(message.into())
    }

    pub fn is_config(&self) -> bool {
        matches!(self, FflError::Config { .. })
    }
}
