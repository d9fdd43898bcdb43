use thiserror::Error;

/// Errors surfaced by the numerical kernels and drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix (|det| = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("non-positive determinant {det:e}: cannot retract onto SL(3)")]
    NonPositiveDeterminant { det: f64 },

    #[error("determinant drift {drift:e} exceeds SL(3) tolerance")]
    DeterminantDrift { drift: f64 },

    #[error("matrix logarithm diverged: {0}")]
    LogDivergence(String),

    #[error("velocity is not tangent to SL(3): tr(F^-1 M) = {trace:e}")]
    NotTangent { trace: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("point outside K: symmetric distance {distance} > radius {radius}")]
    OutsideK { distance: f64, radius: f64 },

    #[error("assumption {inequality} violated at witness {witness}")]
    AssumptionViolated { inequality: String, witness: String },

    #[error("eps must be positive, got {0}")]
    EpsNonPositive(f64),

    #[error("A' is not compactly contained in A: delta = {delta} <= {min}")]
    NotCompactlyContained { delta: f64, min: f64 },

    #[error("homogenized table queried outside its range: {0}")]
    TableOutOfRange(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::LogDivergence(_)
                | Error::TableOutOfRange(_)
                | Error::OutsideK { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
