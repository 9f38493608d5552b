use thiserror::Error;

/// Errors raised by model construction, scale-function evaluation and the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid subgenerator: {0}")]
    InvalidSubgenerator(String),

    #[error("invalid initial distribution: {0}")]
    InvalidInitialDistribution(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("resolvent sI - T is singular at s = {0}")]
    SingularResolvent(String),

    #[error("failed to converge: {0}")]
    ConvergenceFailure(String),

    #[error("roots of psi(s) = r are not separated: {0}")]
    RootMultiplicity(String),

    #[error("imaginary residual {residual:e} exceeds tolerance (magnitude {magnitude:e})")]
    ImaginaryResidual { residual: f64, magnitude: f64 },

    #[error("argument {x} exceeds the overflow guard {x_max}")]
    RangeError { x: f64, x_max: f64 },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("degenerate exponent: {0}")]
    DegenerateExponent(String),

    #[error("threshold vector is not nonincreasing: {0:?}")]
    InfeasibleThresholds(Vec<f64>),

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
