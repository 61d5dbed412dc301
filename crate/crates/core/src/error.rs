use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(
        "non-finite loss or gradient at epoch {epoch}, step {step}: sup={sup}, con_source={con_source:?}, con_target={con_target:?}"
    )]
    Diverged {
        epoch: usize,
        step: usize,
        sup: f64,
        con_source: Option<f64>,
        con_target: Option<f64>,
    },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("missing component: {0}")]
    Missing(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation { .. } | Error::Shape(_) | Error::Missing(_) => true,
            Error::Seed { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Diverged { .. } => "diverged",
            Error::Seed { source, .. } => source.kind(),
            Error::Missing(_) => "missing",
            Error::Runtime(_) => "runtime",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
