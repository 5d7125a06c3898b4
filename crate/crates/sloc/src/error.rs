//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A costate entry is non-negative, so the interior maximizer k = -1/q
    /// does not exist. Raised instead of clamping so solver divergence is
    /// never masked.
    #[error("costate must be negative: q[{index}] = {value}")]
    CostateSign { index: usize, value: f64 },

    /// The phosphate load left its admissible range k > 0.
    #[error("control must be positive: k = {value}")]
    NonpositiveControl { value: f64 },

    #[error("Newton did not converge: last residual {residual:.3e}")]
    NewtonDiverged { residual: f64 },

    #[error("continuation step collapsed below {min_step:.1e}")]
    StepCollapse { min_step: f64 },

    /// The requested operation needs a saddle-point target.
    #[error("no SPP (defect {defect})")]
    NoSpp { defect: i32 },

    /// An eigenvalue sits on (or within tolerance of) the SPP decision
    /// boundary Re = 0 or Re = r, so no SPP decision can be made.
    #[error("no SPP decision: eigenvalue with Re = {re:.3e} within {tol:.1e} of the boundary")]
    CenterEigenvalue { re: f64, tol: f64 },

    /// The defect-count and spectral-band SPP criteria disagree, which flags
    /// a near-degenerate spectrum or a sign-convention bug.
    #[error("SPP criteria disagree (defect {defect}, band criterion {band})")]
    SppCriteriaDisagree { defect: i32, band: bool },

    #[error("objective curves do not intersect in the overlap region")]
    NoIntersection,

    /// Horizon doubling reached its cap without closing the terminal gap.
    #[error("terminal gap {gap:.3e} exceeds {bound:.3e} at the maximal horizon T = {t_max}")]
    TerminalGap { gap: f64, bound: f64, t_max: f64 },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("linear solve failure: {0}")]
    LinearSolve(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("file format error: {0}")]
    FileFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code class: 2 for usage/configuration problems, 1 for
    /// solver and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::InvalidInput(_) => 2,
            _ => 1,
        }
    }
}
