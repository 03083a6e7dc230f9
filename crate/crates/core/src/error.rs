use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("point lies at or near the north pole (last coordinate {last}); inverse projection is singular")]
    PoleSingularity { last: f64 },

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("inconsistent state: {0}")]
    State(String),

    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss} (recent losses {recent:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        recent: Vec<f64>,
    },

    #[error("I/O error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
