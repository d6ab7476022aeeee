use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input data, files or parameters.
    Data,
    /// An internal invariant did not hold.
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("entropy undefined for a single-token attention map")]
    UndefinedEntropy,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("step {step}, layer {layer}: {source}")]
    AtLayer {
        step: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
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
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Invariant(_) => ErrorClass::Internal,
            Error::AtLayer { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, step: usize, layer: usize) -> Self {
        Error::AtLayer {
            step,
            layer,
            source: Box::new(self),
        }
    }
}
