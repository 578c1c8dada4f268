use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A factorization or solve failed, or produced non-finite values.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// The optimizer produced a non-finite mean or a non-positive diagonal.
    #[error("optimizer diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input text; `line` is 1-based.
    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("unsupported labels: {0}")]
    UnsupportedLabel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
