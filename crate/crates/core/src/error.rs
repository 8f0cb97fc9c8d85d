use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("length mismatch: manifest implies {expected} bytes, payload has {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("global test coverage is insufficient: predicted column {column} is empty but {pseudo_count} samples were pseudo-labeled into it")]
    InsufficientCoverage { column: usize, pseudo_count: usize },

    #[error("average precision is undefined: every column of the confusion matrix is zero")]
    UndefinedPrecision,

    #[error("hidden true labels may only be read inside a reveal scope")]
    HiddenLabelAccess,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the pipeline phase it occurred in.
    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            already @ Error::Phase { .. } => already,
            other => Error::Phase {
                phase: phase.to_string(),
                source: Box::new(other),
            },
        }
    }
}
