use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structure is empty in the mask")]
    EmptyStructure,
    #[error("contour has no points")]
    EmptyContour,
    #[error("region too small to define an axis ({0} pixels)")]
    DegenerateRegion(usize),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dimensions must be even, got {0}x{1}")]
    OddSpatialDim(usize, usize),
    #[error("crop output must be at least 2x2, got {0}x{1}")]
    OutputTooSmall(usize, usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("invalid fold count k={k} for {n} records")]
    InvalidK { k: usize, n: usize },
    #[error("box lies outside the image: {0}")]
    BoxOutOfBounds(String),
    #[error("incomplete score set: {0}")]
    IncompleteScores(String),
    #[error("end-diastolic volume must be positive, got {0}")]
    NonPositiveEdv(f64),
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss diverged at epoch {epoch}: {value}")]
    DivergedLoss { epoch: usize, value: f64 },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("json failure: {0}")]
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
