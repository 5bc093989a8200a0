use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contour needs at least 4 nodes, got {0}")]
    TooFewNodes(usize),

    #[error("negative {term} weight {value} at node {node}")]
    NegativeWeight {
        term: &'static str,
        node: usize,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("linear solve failed: pivot {pivot} at row {row}")]
    Singular { row: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model file: {0}")]
    Model(String),

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("expected {expected} predictions, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
