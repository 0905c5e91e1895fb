use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("corpus corrupted: {path} checksum {actual} != manifest {expected}")]
    CorruptCorpus { path: PathBuf, expected: String, actual: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("training diverged at step {step}: {component} is {value}")]
    Divergence { step: u64, component: &'static str, value: f64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

impl Error {
    /// Stable identifier of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Validation { .. } => "validation",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::CorruptCorpus { .. } => "corrupt-corpus",
            Error::Format { .. } => "format",
            Error::Divergence { .. } => "divergence",
            Error::CheckpointMismatch(_) => "checkpoint-mismatch",
        }
    }

    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation { what, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, reason: impl ToString) -> Self {
        Error::Format { what, reason: reason.to_string() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
