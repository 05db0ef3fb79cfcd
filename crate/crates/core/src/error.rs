use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration. `field` is a dotted path to the offending value.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error in {file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than a runtime
    /// failure. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Shape(_) | Error::Parse { .. })
    }
}
