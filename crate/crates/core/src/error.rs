use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, cannot normalize")]
    NormalizeZeroVector { row: usize, norm: f64 },

    #[error("anchor {anchor} has no positive sample in the batch")]
    NoPositives { anchor: usize },

    #[error("anchor {anchor} has no negative sample in the batch")]
    NoNegatives { anchor: usize },

    #[error("samples {i} and {j} collapsed to distance {distance:e} with an active loss term")]
    DegenerateDistance { i: usize, j: usize, distance: f64 },

    #[error("batch of {size} samples is too small for batch statistics")]
    BatchTooSmall { size: usize },

    #[error("dataset has {available} classes, batch needs {requested}")]
    TooFewClasses { available: usize, requested: usize },

    #[error("non-finite loss component `{component}`")]
    NonFiniteLoss { component: &'static str },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("invalid configuration `{key}`: {reason}")]
    ConfigInvalid { key: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
