use thiserror::Error;

/// Errors surfaced by the solver pipeline.
///
/// Variants are grouped by how callers are expected to react: input
/// validation failures (`NonFinite` … `Invalid`), numerical failures that a
/// retry with fresh randomness may fix (`NoConvergence`, `Degenerate`), and
/// completeness failures that indicate the run must not be trusted
/// (`Incomplete`, `SeedDisagreement`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("zero divisor entry at ({row}, {col})")]
    ZeroDivisor { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence: residual {residual:.3e} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },

    #[error("monodromy incomplete after {loops} loops: {found} points found, last growth at loop {last_growth}")]
    Incomplete {
        loops: usize,
        found: usize,
        last_growth: usize,
    },

    #[error("solution counts disagree across seeds: {0:?}")]
    SeedDisagreement(Vec<usize>),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True when the error indicates malformed or out-of-domain input, as
    /// opposed to a numerical or completeness failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::ZeroDivisor { .. }
                | Error::Dimension(_)
                | Error::InvalidModel(_)
                | Error::Domain(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::Invalid(_)
        )
    }
}
