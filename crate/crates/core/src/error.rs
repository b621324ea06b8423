//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its mathematical domain (e.g. phenotype not in [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (shape mismatch, invalid configuration of a call).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Lesion placement could not satisfy the non-overlap constraint.
    #[error("placement error: placed {placed} of {requested} lesions before exhausting attempts")]
    Placement { requested: usize, placed: usize },

    /// Rejection sampling exhausted its attempt budget. Carries the best-scoring
    /// draw seen so far for diagnostics.
    #[error("rejection sampling exhausted after {attempts} attempts (best logit {best_logit})")]
    RejectionExhausted {
        attempts: usize,
        best_logit: f64,
        best_sample: Box<ndarray::ArrayD<f64>>,
    },

    /// A metric input was degenerate (e.g. zero variance inside the mask for NCC).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Not enough data points for the requested computation.
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A loss or activation became non-finite during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed tensor file or checkpoint.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind string, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Placement { .. } => "placement",
            Error::RejectionExhausted { .. } => "rejection_exhausted",
            Error::DegenerateInput(_) => "degenerate_metric",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::NonFinite(_) => "nonfinite",
            Error::Config(_) => "bad_config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "bad_config",
        }
    }
}
