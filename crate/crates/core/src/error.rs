use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UldaError>;

#[derive(Debug, Error)]
pub enum UldaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("unsupported {what} format version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("config digest mismatch: artifact has {found}, config gives {expected}")]
    DigestMismatch { found: String, expected: String },

    #[error("refusing to overwrite {0} (pass --force to replace it)")]
    WouldOverwrite(PathBuf),

    #[error("external encoder weights unavailable: {0}")]
    MissingWeights(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl UldaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        UldaError::InvalidArgument(msg.into())
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        UldaError::Format {
            what,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UldaError::Io {
            path: path.into(),
            source,
        }
    }
}
