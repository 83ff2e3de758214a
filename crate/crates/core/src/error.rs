use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}: bad magic bytes (expected {expected:?})", .path.display())]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{}: unsupported format version {found} (expected {expected})", .path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: file truncated ({detail})", .path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("{}: dimension overflow ({detail})", .path.display())]
    DimOverflow { path: PathBuf, detail: String },

    #[error("{}: checkpoint config does not match ({detail})", .path.display())]
    ConfigMismatch { path: PathBuf, detail: String },

    #[error("{}: dataset integrity error ({detail})", .path.display())]
    Integrity { path: PathBuf, detail: String },

    #[error("non-finite loss at step {step}: {components}")]
    NonFinite { step: u64, components: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
