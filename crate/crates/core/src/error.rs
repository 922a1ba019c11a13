use thiserror::Error;

/// Errors raised by ingestion, model evaluation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed for ids {ids:?}: {message}")]
    Validation { ids: Vec<u64>, message: String },

    #[error("value out of domain at line {line}: {message}")]
    Domain { line: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("evaluation error for unit {id}: {message}")]
    Evaluation { id: u64, message: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("estimation error: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
