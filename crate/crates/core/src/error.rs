use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    /// |rho| is within `EPS_RHO` of 1; the caller should use the degenerate branch.
    #[error("correlation {rho} is too close to +/-1 for the bivariate closed form")]
    NearDegenerateCorrelation { rho: f64 },

    #[error("vectors are (near) parallel; conditioning on both projections is singular")]
    ParallelDirections,

    #[error("zero vector: {0}")]
    ZeroVector(&'static str),

    /// ||w_r * x_i|| = 0 for neuron `r` and sample `i`.
    #[error("degenerate masked direction: ||w_{r} * x_{i}|| = 0")]
    DegenerateDirection { i: usize, r: usize },

    #[error("input norm ||x_{index}|| = {norm} exceeds 1")]
    InputNorm { index: usize, norm: f64 },

    #[error("target |y_{index}| = {value} exceeds bound {bound}")]
    TargetBound { index: usize, value: f64, bound: f64 },

    #[error("inputs {0} and {1} are collinear")]
    Collinear(usize, usize),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("non-finite value at draw {index}")]
    NonFinite { index: u64 },

    #[error("training diverged at iteration {iter}: loss {loss:e}")]
    Diverged { iter: usize, loss: f64 },

    #[error("{0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be finite",
        })
    }
}

pub(crate) fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

pub(crate) fn check_nonnegative(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be nonnegative and finite",
        })
    }
}
