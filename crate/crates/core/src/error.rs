use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at iteration {iteration} (value {value})")]
    NonFinite { iteration: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used on the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Label { .. } => "label",
            Error::Contract(_) => "contract",
            Error::NonFinite { .. } => "non_finite",
            Error::Format(_) => "format",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
        }
    }
}
