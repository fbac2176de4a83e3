use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    // file formats
    #[error("malformed header: expected `{expected}`, found `{found}`")]
    MalformedHeader { expected: String, found: String },
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error("line {line}: bad timestamp `{value}`")]
    BadTimestamp { line: usize, value: String },
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("dataset has no records")]
    EmptyDataset,
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("conflicting distances for camera pair ({0}, {1})")]
    AsymmetricConflict(String, String),
    #[error("non-positive distance {distance} between {a} and {b}")]
    NonPositiveDistance { a: String, b: String, distance: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    // array shapes
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cannot split axis of size {size} into {parts} parts")]
    TooManyParts { size: usize, parts: usize },

    // losses
    #[error("label smoothing epsilon {0} outside [0, 1] or too few classes")]
    BadEpsilon(f64),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),
    #[error("anchor {0} has no negative in the batch")]
    NoNegative(usize),

    // spatio-temporal
    #[error("input must be strictly positive, got {0}")]
    NonPositiveInput(f64),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("non-positive sample {0}")]
    NonPositiveSample(f64),
    #[error("no same-identity cross-camera pairs")]
    NoPositivePairs,

    // retrieval / metrics
    #[error("no distance between cameras {0} and {1}")]
    MissingCameraDistance(String, String),
    #[error("bad re-ranking neighbourhood sizes: {0}")]
    BadK(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("no query has a relevant gallery item")]
    NoValidQueries,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for filesystem failures, as opposed to bad input data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
