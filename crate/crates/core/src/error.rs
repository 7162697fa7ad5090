use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TracerError>;

#[derive(Debug, Error)]
pub enum TracerError {
    #[error("non-finite values in {what} at indices {indices:?}")]
    NonFinite {
        what: &'static str,
        indices: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("labels contain a single class: {0}")]
    SingleClass(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TracerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TracerError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Fails with the offending indices when any value is NaN or infinite.
pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    let indices: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_finite())
        .map(|(i, _)| i)
        .take(32)
        .collect();
    if indices.is_empty() {
        Ok(())
    } else {
        Err(TracerError::NonFinite { what, indices })
    }
}
