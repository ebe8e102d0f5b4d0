//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric: relative asymmetry {gap:.3e} exceeds {tol:.3e}")]
    NotSymmetric { gap: f64, tol: f64 },

    #[error("matrix is not positive definite: pivot {pivot} has value {value:.6e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset construction failed: {0}")]
    Dataset(String),

    #[error("IDX parse error at byte {offset}: {what}")]
    IdxFormat { offset: u64, what: String },

    #[error("kernel mode mismatch: {0}")]
    KernelMode(String),

    #[error("ridge system is singular: least eigenvalue {lambda_min:.6e} with ridge {beta:.6e}")]
    SingularSystem { lambda_min: f64, beta: f64 },

    #[error("training aborted at step {step}: {why} (last finite loss {last_loss:.6e})")]
    TrainingAborted {
        step: usize,
        why: String,
        last_loss: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint serialization: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
