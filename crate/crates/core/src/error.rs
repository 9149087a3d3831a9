use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid rubric spec: {0}")]
    InvalidSpec(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerically singular system (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at {stage} epoch {epoch} batch {batch}: non-finite loss")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("instance `{0}` not found")]
    UnknownInstance(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("model is incomplete: {0}")]
    Incomplete(String),

    #[error("empty split")]
    EmptySplit,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
