use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("skinning weight row {row} sums to {sum} (expected 1 ± 1e-6)")]
    WeightNotNormalized { row: usize, sum: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate face {0} (zero area)")]
    DegenerateFace(usize),

    #[error("anchor {0} has no neighbors")]
    NoNeighbors(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite attribute on primitive {0}")]
    NonFiniteAttribute(usize),

    #[error("non-finite transform for primitive {0}")]
    NonFiniteTransform(usize),

    #[error("matrix is not a proper rotation candidate (det = {0})")]
    NotPositiveDeterminant(f64),

    #[error("forward state missing or does not match this scene: {0}")]
    MissingForwardState(String),

    #[error("non-finite {0} output")]
    NonFiniteOutput(String),

    #[error("non-finite {term} at step {step}")]
    NumericFailure { step: usize, term: String },

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad format in {context}: {message}")]
    Format { context: String, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("subject `{subject}`: {cameras} cameras but {images} images")]
    CountMismatch {
        subject: String,
        cameras: usize,
        images: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by numerically invalid state rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericFailure { .. }
                | Error::NonFiniteOutput(_)
                | Error::NonFiniteAttribute(_)
                | Error::NonFiniteTransform(_)
                | Error::NotPositiveDeterminant(_)
        )
    }
}
