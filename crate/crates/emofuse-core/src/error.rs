//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dsp error: {0}")]
    Dsp(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("fold construction error: {0}")]
    Folds(String),

    #[error("metric error: {0}")]
    Metrics(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
