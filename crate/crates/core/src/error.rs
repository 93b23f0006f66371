use std::path::PathBuf;

use crate::types::{PointId, SceneId};

/// Errors raised by the buffering library and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot draw from an empty range")]
    EmptyRange,
    #[error("scene has no points")]
    EmptyScene,
    #[error("point {0:?} is not part of the scene")]
    UnknownPoint(PointId),
    #[error("cluster level {level} outside [1, {levels}]")]
    BadLevel { level: usize, levels: usize },
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
    #[error("no label hierarchy available for scene {0}")]
    NoHierarchy(SceneId),
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad permutation: {0}")]
    BadPermutation(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("accuracy matrix entry a[{row}][{col}] is not populated")]
    IncompleteMatrix { row: usize, col: usize },
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
