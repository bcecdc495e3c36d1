use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented precondition or type invariant.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// 1/Q_i = 1/Q - cos(phi)/|Q_c| came out nonpositive.
    #[error("non-physical internal quality factor: 1/Q_i = {inverse_qi:e} <= 0")]
    NonPhysical { inverse_qi: f64 },

    #[error("input too short: need at least {required} samples, got {actual}")]
    Length { required: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("frequency grid is not strictly increasing at index {index}")]
    NonMonotonic { index: usize },

    #[error("sweeps do not share a frequency grid (sweep {index})")]
    GridMismatch { index: usize },

    #[error("points are collinear; no finite circle")]
    Collinear,

    #[error("degenerate trace: {0}")]
    Degenerate(String),

    #[error("ill-posed fit: {0}")]
    IllPosed(String),

    #[error("span error: {0}")]
    Span(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
