//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("{op}: shape mismatch ({details})")]
    Shape { op: &'static str, details: String },

    /// A precondition on an argument value failed.
    #[error("{op}: {details}")]
    Invalid { op: &'static str, details: String },

    /// A configuration value is unusable.
    #[error("config: {0}")]
    Config(String),

    /// Manifest file could not be parsed.
    #[error("manifest {path}, line {line}: {details}")]
    Manifest {
        path: String,
        line: usize,
        details: String,
    },

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Checkpoint config does not match what the caller requires.
    /// Each entry is (field, stored value, requested value).
    #[error("checkpoint config mismatch: {}", format_diff(.0))]
    ConfigMismatch(Vec<(String, String, String)>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image {path}: {source}")]
    Image {
        path: String,
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_diff(diff: &[(String, String, String)]) -> String {
    diff.iter()
        .map(|(field, stored, requested)| format!("{field}: stored={stored} requested={requested}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
