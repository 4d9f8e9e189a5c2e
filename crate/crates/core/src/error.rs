use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported transform size {size} on axis {axis}: only powers of two are supported")]
    UnsupportedSize { axis: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("non-finite gradient at tape node {node} ({op})")]
    PoisonedGradient { node: usize, op: &'static str },

    #[error("non-finite loss: {0}")]
    PoisonedLoss(String),

    #[error("optimizer step rejected: non-finite gradient in parameter tensor {tensor}")]
    PoisonedStep { tensor: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::PoisonedGradient { .. } | Error::PoisonedLoss(_) | Error::PoisonedStep { .. }
        )
    }
}
