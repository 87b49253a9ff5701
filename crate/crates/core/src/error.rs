use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MmtError>;

#[derive(Debug, Error)]
pub enum MmtError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration or input failed validation before any work was done.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("graph error: {0}")]
    Graph(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MmtError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MmtError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MmtError::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MmtError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure
    /// during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MmtError::Validation(_)
                | MmtError::Shape(_)
                | MmtError::BadMagic { .. }
                | MmtError::Truncated { .. }
                | MmtError::Checksum { .. }
                | MmtError::Format { .. }
        )
    }
}
