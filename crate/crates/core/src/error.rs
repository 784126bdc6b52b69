use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PandError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PandError {
    /// Invalid configuration or hyperparameter.
    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {what} {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape error: {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numeric error in {component}: {detail}")]
    Numeric {
        component: &'static str,
        detail: String,
    },

    #[error("normalization error: class {class} produced a zero text feature")]
    ZeroTextFeature { class: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("ingestion error: {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("freezing violation: {0}")]
    FreezeViolation(String),

    #[error("anchors must be frozen before {0}")]
    NotFrozen(&'static str),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PandError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PandError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(component: &'static str, detail: impl Into<String>) -> Self {
        PandError::Numeric {
            component,
            detail: detail.into(),
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_usage(&self) -> bool {
        matches!(self, PandError::Config(_))
    }
}
