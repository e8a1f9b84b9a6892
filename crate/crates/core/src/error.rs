use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API called outside its contract (non-scalar backward, K > n, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Configuration or spec validation, one message per offending field.
    #[error("validation error: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// Training diverged (non-finite parameters or loss).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("integrity error in {}: {reason}", file.display())]
    Integrity { file: PathBuf, reason: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::UnsupportedVersion { .. } | Error::Json(_)
        )
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
