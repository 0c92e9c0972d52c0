use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    DegenerateShape(Vec<usize>),
    #[error("cannot reshape {from:?} into {to:?}: element counts differ")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("matrix dimensions do not agree: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Geometry(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("layer {layer} has no cached forward state; run forward in training mode first")]
    MissingCache { layer: usize },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
