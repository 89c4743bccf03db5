use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient neighbors: need {needed}, found {found}")]
    InsufficientNeighbors { needed: usize, found: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("training shape {0} has no normals")]
    MissingNormals(usize),

    #[error("non-finite loss at shape {shape}, point {point}: {detail}")]
    NonFiniteLoss {
        shape: usize,
        point: usize,
        detail: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
