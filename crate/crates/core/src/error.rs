use thiserror::Error;

/// Errors produced by the upsampling library.
#[derive(Debug, Error)]
pub enum SapaError {
    #[error("index ({row}, {col}, {ch}) out of range for {height}x{width}x{channels} tensor")]
    Index {
        row: usize,
        col: usize,
        ch: usize,
        height: usize,
        width: usize,
        channels: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SapaError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SapaError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SapaError>;
