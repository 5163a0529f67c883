use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor maps (or a map and a schema/transform) disagree on names or shapes.
    #[error("structural mismatch at tensor `{name}`: {reason}")]
    StructuralMismatch { name: String, reason: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid transform spec: {0}")]
    InvalidSpec(String),

    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("duplicate task `{0}`")]
    DuplicateTask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("corrupt checkpoint: {0}")]
    Format(String),

    #[error("unsupported version: {0}")]
    Version(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::StructuralMismatch {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
