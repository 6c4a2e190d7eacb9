use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate box: RECIST endpoints span zero width or height and no padding was requested")]
    DegenerateBox,

    #[error("invalid pixel spacing {0} mm/px (must be > 0)")]
    InvalidSpacing(f64),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("duplicate lesion_id {0:?}")]
    DuplicateId(String),

    #[error("at least 3 patients are required for a three-way split, found {0}")]
    InsufficientPatients(usize),

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("invalid window width {0} HU (must be > 0)")]
    InvalidWindow(f64),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("label class {0} has no lesions")]
    EmptyClass(String),

    #[error("annotation {0:?} has no body part label")]
    Unlabeled(String),

    #[error("group {0} has no lesions")]
    EmptyGroup(String),

    #[error("cannot sample {requested} lesions from {available}")]
    SampleSize { requested: usize, available: usize },

    #[error("prediction image_key {found:?} does not match {expected:?}")]
    KeyMismatch { expected: String, found: String },

    #[error("evaluation needs at least one test image")]
    EmptyEval,

    #[error("image_key {0:?} is not present in the annotation index")]
    MissingIndex(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: u64, column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column: column.into(),
            message: message.into(),
        }
    }

    /// Attach the file a failure came from.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
