use nalgebra::Complex;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spectral parameter {re}{im:+}i: {reason}")]
    InvalidSpectralParameter { re: f64, im: f64, reason: &'static str },

    #[error("size error: {0}")]
    Size(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("column index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("degenerate leave-one-out denominator |1 + x'G_x/n| = {0:e}")]
    Degenerate(f64),

    #[error("singular rank-one update, |1 + v'M^-1 u| = {0:e}")]
    SingularUpdate(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("kolmogorov schedule invariant violated: {0}")]
    Schedule(String),

    #[error("{0} must be positive")]
    NonPositive(&'static str),

    #[error("point {l} outside the domain Omega of z = {z}")]
    OutsideDomain { l: Complex<f64>, z: Complex<f64> },

    #[error("fixed point did not converge after {iterations} iterations (last iterate {last}, residual {residual:e})")]
    NonConvergence { last: Complex<f64>, residual: f64, iterations: usize },

    #[error("solution was computed for a different model or spectral parameter")]
    MismatchedSolution,

    #[error("stability bound inapplicable: kF(1 + delta) = {0} >= 1")]
    Inapplicable(f64),

    #[error("fixed point failed at x = {x}: {source}")]
    GridPoint { x: f64, source: Box<Error> },

    #[error("config error: {0}")]
    Config(String),

    #[error("validity region violated: {0}")]
    ValidityRegion(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
