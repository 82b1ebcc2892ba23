use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("class {0} has zero images")]
    EmptyClass(String),
    #[error("unknown backbone {name:?}; valid names: {valid}")]
    UnknownBackbone { name: String, valid: String },
    #[error("weights file {path}: {message}")]
    Weights { path: PathBuf, message: String },
    #[error("missing predictions for ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
    #[error("alpha {alpha} not tabulated; supported: 0.05, 0.1")]
    UnsupportedAlpha { alpha: f64 },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Error {
        Error::Invalid(msg.into())
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::EmptyClass(_) => "empty_class",
            Error::UnknownBackbone { .. } => "unknown_backbone",
            Error::Weights { .. } => "weights",
            Error::MissingIds(_) => "missing_ids",
            Error::UnsupportedAlpha { .. } => "unsupported_alpha",
            Error::Config { .. } => "config",
            Error::Invalid(_) => "invalid",
        }
    }
}
