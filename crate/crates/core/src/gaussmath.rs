//! Scalar Gaussian special functions and univariate truncated moments.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_positive, Result};

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// N(mu, kappa^2) with kappa > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateGaussian {
    pub mu: f64,
    pub kappa: f64,
}

impl UnivariateGaussian {
    pub fn new(mu: f64, kappa: f64) -> Result<Self> {
        check_finite("mu", mu)?;
        check_positive("kappa", kappa)?;
        Ok(UnivariateGaussian { mu, kappa })
    }
}

/// Standard normal CDF, via `erfc` so both tails keep full relative accuracy.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// phi(x) = exp(-x^2).
pub fn sq_exp_phi(x: f64) -> f64 {
    (-x * x).exp()
}

/// psi(x) = |x| exp(-x^2), maximized at 1/sqrt(2) with value 1/sqrt(2e).
pub fn abs_sq_exp_psi(x: f64) -> f64 {
    x.abs() * sq_exp_phi(x)
}

pub fn psi_sup() -> f64 {
    (0.5 / std::f64::consts::E).sqrt()
}

/// E[z 1{z >= a}] for z ~ g.
pub fn truncated_first_moment(g: UnivariateGaussian, a: f64) -> Result<f64> {
    let g = UnivariateGaussian::new(g.mu, g.kappa)?;
    let t = (g.mu - a) / g.kappa;
    Ok(g.kappa * std_normal_pdf(t) + g.mu * std_normal_cdf(t))
}

/// E[z^2 1{z >= a}] for z ~ g.
pub fn truncated_second_moment(g: UnivariateGaussian, a: f64) -> Result<f64> {
    let g = UnivariateGaussian::new(g.mu, g.kappa)?;
    let t = (g.mu - a) / g.kappa;
    let value = g.kappa * (a + g.mu) * std_normal_pdf(t)
        + (g.kappa * g.kappa + g.mu * g.mu) * std_normal_cdf(t);
    Ok(value.max(0.0))
}

/// exp(-alpha^2 / 2), an upper bound on |Phi(alpha) - 1{alpha >= 0}|.
pub fn cdf_indicator_gap_bound(alpha: f64) -> f64 {
    (-0.5 * alpha * alpha).exp()
}

/// Moments of a standard normal restricted to [lo, hi]; either end may be
/// infinite. Returns (P, E[z 1], E[z^2 1]).
pub fn standard_interval_moments(lo: f64, hi: f64) -> (f64, f64, f64) {
    if !(lo < hi) {
        return (0.0, 0.0, 0.0);
    }
    // Use the upper tail when both ends sit above zero to keep precision.
    let prob = if lo > 0.0 {
        std_normal_cdf(-lo) - std_normal_cdf(-hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    };
    let pdf_lo = if lo.is_finite() { std_normal_pdf(lo) } else { 0.0 };
    let pdf_hi = if hi.is_finite() { std_normal_pdf(hi) } else { 0.0 };
    let xpdf_lo = if lo.is_finite() { lo * pdf_lo } else { 0.0 };
    let xpdf_hi = if hi.is_finite() { hi * pdf_hi } else { 0.0 };
    let first = pdf_lo - pdf_hi;
    let second = (prob + xpdf_lo - xpdf_hi).max(0.0);
    (prob, first, second)
}
