use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the support or precondition of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("simulation failed for task {task}: {message}")]
    Simulation { task: String, message: String },

    #[error("ODE integration failed at t = {t}: {reason} (after {steps} steps)")]
    Integration {
        t: f64,
        steps: usize,
        reason: String,
    },

    #[error("token layout error: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        curve: Vec<f64>,
    },

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("format error in {path:?}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("incompatible schema version in {path:?}: found {found}, expected {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("unknown task {name:?}; registered tasks: {registry}")]
    UnknownTask { name: String, registry: String },

    #[error("configuration error at {field}: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}
