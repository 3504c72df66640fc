//! Bivariate normal CDF, Gaussian copula and truncated moments of a
//! correlated Gaussian pair.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_positive, Error, Result};
use crate::gaussmath::{
    std_normal_cdf, std_normal_pdf, standard_interval_moments, truncated_second_moment,
    UnivariateGaussian,
};

/// Correlations with |rho| >= 1 - EPS_RHO use the perfectly correlated limit.
pub const EPS_RHO: f64 = 1e-7;

const GL_ORDER: usize = 20;

/// (z1, z2) ~ N((mu1, mu2), [[k1^2, rho k1 k2], [rho k1 k2, k2^2]]) truncated
/// to {z1 >= a, z2 >= b}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateMomentParams {
    pub mu1: f64,
    pub kappa1: f64,
    pub mu2: f64,
    pub kappa2: f64,
    pub rho: f64,
    pub a: f64,
    pub b: f64,
}

impl BivariateMomentParams {
    pub fn validate(&self) -> Result<()> {
        check_finite("mu1", self.mu1)?;
        check_finite("mu2", self.mu2)?;
        check_positive("kappa1", self.kappa1)?;
        check_positive("kappa2", self.kappa2)?;
        check_rho(self.rho)?;
        // Thresholds may be infinite (an inactive truncation).
        if self.a.is_nan() || self.b.is_nan() {
            return Err(Error::InvalidParameter {
                name: "threshold",
                value: f64::NAN,
                reason: "must not be NaN",
            });
        }
        Ok(())
    }
}

/// Truncated moments E[g(z) 1{z1 >= a, z2 >= b}].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledMoments {
    pub e_z1: f64,
    pub e_z2: f64,
    pub e_z1sq: f64,
    pub e_z2sq: f64,
    pub e_z1z2: f64,
    pub prob: f64,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho.is_nan() || rho.abs() > 1.0 {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: rho,
            reason: "correlation must lie in [-1, 1]",
        });
    }
    Ok(())
}

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut rule = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let kf = k as f64;
                    let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let step = p1 / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            rule.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
        }
        rule
    })
}

/// Upper orthant probability P(X > h, Y > k) (Genz's reduction of the
/// Drezner-Wesolowsky integral).
fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let rule = gauss_legendre();
    let two_pi = 2.0 * PI;
    let mut hk = h * k;
    if r.abs() <= 0.925 {
        let mut bvn = 0.0;
        if r != 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = 0.5 * r.asin();
            for &(x, w) in rule {
                let sn = (asr * (x + 1.0)).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
            bvn *= asr / two_pi;
        }
        return bvn + std_normal_cdf(-h) * std_normal_cdf(-k);
    }

    let mut k = k;
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-0.5 * (b_s / a_s + hk)).exp()
            * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = b_s.sqrt();
            bvn -= (-0.5 * hk).exp()
                * two_pi.sqrt()
                * std_normal_cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a *= 0.5;
        for &(x, w) in rule {
            let xs = (a * (x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (b_s / xs + hk);
            // Skipping negligible nodes also avoids inf * 0 at extreme thresholds.
            if asr > -100.0 {
                bvn += a
                    * w
                    * asr.exp()
                    * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                        - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn + std_normal_cdf(-h.max(k))
    } else {
        -bvn + (std_normal_cdf(-h) - std_normal_cdf(-k)).max(0.0)
    }
}

/// Phi2(a, b, rho) = P(X <= a, Y <= b) for standard normals with correlation rho.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    if a.is_nan() || b.is_nan() {
        return Err(Error::InvalidParameter {
            name: "threshold",
            value: f64::NAN,
            reason: "must not be NaN",
        });
    }
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if a == f64::INFINITY {
        return Ok(std_normal_cdf(b));
    }
    if b == f64::INFINITY {
        return Ok(std_normal_cdf(a));
    }
    Ok(upper_orthant(-a, -b, rho).clamp(0.0, 1.0))
}

/// C(a, b, rho) = Phi2(a, b, rho) - Phi(a) Phi(b).
pub fn gaussian_copula(a: f64, b: f64, rho: f64) -> Result<f64> {
    if rho == 0.0 {
        check_rho(rho)?;
        return Ok(0.0);
    }
    Ok(bvn_cdf(a, b, rho)? - std_normal_cdf(a) * std_normal_cdf(b))
}

/// Truncated moments of a standard pair with correlation rho, |rho| < 1 - EPS_RHO.
pub fn coupled_standard_moments(a: f64, b: f64, rho: f64) -> Result<CoupledMoments> {
    check_rho(rho)?;
    if rho.abs() >= 1.0 - EPS_RHO {
        return Err(Error::NearDegenerateCorrelation { rho });
    }
    let prob = bvn_cdf(-a, -b, rho)?;
    let sq = ((1.0 - rho) * (1.0 + rho)).sqrt();

    // pdf(a) Phi((rho a - b)/sq) and its mirror; the x*pdf(x) forms vanish at
    // infinite thresholds.
    let (pa, apa) = density_terms(a);
    let (pb, bpb) = density_terms(b);
    let c1 = std_normal_cdf((rho * a - b) / sq);
    let c2 = std_normal_cdf((rho * b - a) / sq);
    let t1 = pa * c1;
    let t2 = pb * c2;
    let at1 = apa * c1;
    let bt2 = bpb * c2;
    // exp(-(a^2 - 2 rho a b + b^2) / (2 (1 - rho^2))) / (2 pi), factored.
    let joint = if a.is_finite() && b.is_finite() {
        pa * std_normal_pdf((b - rho * a) / sq)
    } else {
        0.0
    };

    Ok(CoupledMoments {
        e_z1: t1 + rho * t2,
        e_z2: t2 + rho * t1,
        e_z1sq: (prob + at1 + rho * rho * bt2 + rho * sq * joint).max(0.0),
        e_z2sq: (prob + bt2 + rho * rho * at1 + rho * sq * joint).max(0.0),
        e_z1z2: rho * prob + rho * (at1 + bt2) + sq * joint,
        prob,
    })
}

fn density_terms(x: f64) -> (f64, f64) {
    if x.is_finite() {
        let p = std_normal_pdf(x);
        (p, x * p)
    } else {
        (0.0, 0.0)
    }
}

/// The rho = +/-1 limit: z2 = +/- z1.
pub fn coupled_moments_limit(a: f64, b: f64, positive: bool) -> CoupledMoments {
    if positive {
        let (p, m1, m2) = standard_interval_moments(a.max(b), f64::INFINITY);
        CoupledMoments {
            e_z1: m1,
            e_z2: m1,
            e_z1sq: m2,
            e_z2sq: m2,
            e_z1z2: m2,
            prob: p,
        }
    } else {
        // z1 >= a and -z1 >= b.
        let (p, m1, m2) = standard_interval_moments(a, -b);
        CoupledMoments {
            e_z1: m1,
            e_z2: -m1,
            e_z1sq: m2,
            e_z2sq: m2,
            e_z1z2: -m2,
            prob: p,
        }
    }
}

/// Standard-pair moments with the degenerate branch taken near |rho| = 1.
pub fn coupled_moments(a: f64, b: f64, rho: f64) -> Result<CoupledMoments> {
    check_rho(rho)?;
    if rho.abs() >= 1.0 - EPS_RHO {
        Ok(coupled_moments_limit(a, b, rho > 0.0))
    } else {
        coupled_standard_moments(a, b, rho)
    }
}

/// Truncated moments of a general pair, obtained from the standardized pair.
/// Near-degenerate correlations use the perfectly correlated limit.
pub fn pair_moments(p: &BivariateMomentParams) -> Result<CoupledMoments> {
    p.validate()?;
    let ha = (p.a - p.mu1) / p.kappa1;
    let hb = (p.b - p.mu2) / p.kappa2;
    let s = coupled_moments(ha, hb, p.rho)?;
    let (m1, m2, k1, k2) = (p.mu1, p.mu2, p.kappa1, p.kappa2);
    Ok(CoupledMoments {
        e_z1: m1 * s.prob + k1 * s.e_z1,
        e_z2: m2 * s.prob + k2 * s.e_z2,
        e_z1sq: (m1 * m1 * s.prob + 2.0 * m1 * k1 * s.e_z1 + k1 * k1 * s.e_z1sq).max(0.0),
        e_z2sq: (m2 * m2 * s.prob + 2.0 * m2 * k2 * s.e_z2 + k2 * k2 * s.e_z2sq).max(0.0),
        e_z1z2: m1 * m2 * s.prob + m1 * k2 * s.e_z2 + m2 * k1 * s.e_z1 + k1 * k2 * s.e_z1z2,
        prob: s.prob,
    })
}

/// E[z1 z2 1{z1 >= a, z2 >= b}] for a general pair with |rho| < 1 - EPS_RHO.
pub fn relu_product_expectation(p: &BivariateMomentParams) -> Result<f64> {
    p.validate()?;
    if p.rho.abs() >= 1.0 - EPS_RHO {
        return Err(Error::NearDegenerateCorrelation { rho: p.rho });
    }
    Ok(pair_moments(p)?.e_z1z2)
}

/// E[relu(z)^2], the diagonal (rho = 1, equal marginals) case.
pub fn degenerate_relu_second_moment(g: UnivariateGaussian) -> Result<f64> {
    truncated_second_moment(g, 0.0)
}

/// 2 exp(-min(a, b)^2 / 2), with the signed minimum squared.
pub fn indicator_joint_gap_bound(a: f64, b: f64) -> f64 {
    let m = a.min(b);
    2.0 * (-0.5 * m * m).exp()
}

/// |arcsin rho| / (2 pi) exp(-(a^2 - 2 rho a b + b^2) / (2 (1 - rho^2))).
pub fn copula_arcsin_bound(a: f64, b: f64, rho: f64) -> f64 {
    let q = (a * a - 2.0 * rho * a * b + b * b) / (2.0 * (1.0 - rho * rho));
    rho.asin().abs() / (2.0 * PI) * (-q).exp()
}

/// |rho| / 4 exp(-(a^2 + b^2) / 4).
pub fn copula_product_bound(a: f64, b: f64, rho: f64) -> f64 {
    rho.abs() / 4.0 * (-(a * a + b * b) / 4.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_thresholds_stay_finite() {
        for &(a, b, rho) in &[(325.87, 229.78, -0.9366), (-144.0, -545.0, -0.9337), (300.0, -300.0, 0.95), (-60.0, -80.0, 0.99)] {
            let p = bvn_cdf(a, b, rho).unwrap();
            assert!(p.is_finite());
            let want = if a > 0.0 && b > 0.0 { 1.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-15, "{a} {b} {rho}: {p}");
            let m = coupled_standard_moments(-a, -b, rho).unwrap();
            assert!(m.e_z1z2.is_finite() && m.prob.is_finite());
        }
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
        }
        s * h / 3.0
    }

    /// Phi2 by integrating the conditional CDF of the second coordinate.
    fn phi2_quad(a: f64, b: f64, rho: f64) -> f64 {
        let sq = (1.0 - rho * rho).sqrt();
        let lo = -12.0;
        if a <= lo {
            return 0.0;
        }
        simpson(
            |x| std_normal_pdf(x) * std_normal_cdf((b - rho * x) / sq),
            lo,
            a.min(12.0),
            20000,
        )
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre();
        let total: f64 = rule.iter().map(|&(_, w)| w).sum();
        assert!((total - 2.0).abs() < 1e-14);
        let x38: f64 = rule.iter().map(|&(x, w)| w * x.powi(38)).sum();
        assert!((x38 - 2.0 / 39.0).abs() < 1e-14);
    }

    #[test]
    fn bvn_examples() {
        assert!((bvn_cdf(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let expect = 0.25 + 0.5f64.asin() / (2.0 * PI);
        assert!((bvn_cdf(0.0, 0.0, 0.5).unwrap() - expect).abs() < 1e-14);
        assert!((bvn_cdf(0.0, 0.0, 0.5).unwrap() - phi2_quad(0.0, 0.0, 0.5)).abs() < 1e-10);
        assert!((bvn_cdf(8.0, -0.3, 0.7).unwrap() - std_normal_cdf(-0.3)).abs() < 1e-10);
        assert!(bvn_cdf(0.0, 0.0, 1.01).is_err());
    }

    #[test]
    fn bvn_matches_quadrature_across_branches() {
        for &rho in &[-0.99, -0.95, -0.9, -0.5, -0.1, 0.2, 0.6, 0.93, 0.97, 0.999] {
            for &(a, b) in &[(0.5, -0.2), (-1.3, -0.7), (2.1, 1.4), (-2.5, 0.9), (0.0, 0.0)] {
                let got = bvn_cdf(a, b, rho).unwrap();
                let want = phi2_quad(a, b, rho);
                assert!((got - want).abs() < 1e-11, "{a} {b} {rho}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn bvn_perfect_correlation() {
        assert!((bvn_cdf(0.3, 0.8, 1.0).unwrap() - std_normal_cdf(0.3)).abs() < 1e-15);
        let want = (std_normal_cdf(0.3) - std_normal_cdf(-0.8)).max(0.0);
        assert!((bvn_cdf(0.3, 0.8, -1.0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn copula_examples() {
        assert_eq!(gaussian_copula(1.2, -0.4, 0.0).unwrap(), 0.0);
        assert!((gaussian_copula(0.0, 0.0, 1.0).unwrap() - 0.25).abs() < 1e-15);
        let c = gaussian_copula(0.5, -0.2, 0.6).unwrap();
        let q = phi2_quad(0.5, -0.2, 0.6) - std_normal_cdf(0.5) * std_normal_cdf(-0.2);
        assert!((c - q).abs() < 1e-9);
    }

    #[test]
    fn standard_moment_examples() {
        let m = coupled_standard_moments(0.0, 0.0, 0.0).unwrap();
        assert!((m.e_z1 - 0.5 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((m.e_z1z2 - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!(coupled_standard_moments(0.0, 0.0, 1.0 - 1e-9).is_err());
        let lim = coupled_moments(0.0, 0.0, 1.0 - 1e-9).unwrap();
        assert!((lim.e_z1z2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn standard_moments_match_quadrature() {
        for &(a, b, rho) in &[(0.3, -0.4, 0.5), (-1.0, 0.7, -0.6), (1.5, 1.1, 0.9), (0.0, -2.0, 0.2)] {
            let m = coupled_standard_moments(a, b, rho).unwrap();
            let sq = (1.0 - rho * rho).sqrt();
            let tail = |z: f64| std_normal_cdf((rho * z - b) / sq);
            let cond = |z: f64| UnivariateGaussian::new(rho * z, sq).unwrap();
            let q_z1 = simpson(|z| z * std_normal_pdf(z) * tail(z), a, 12.0, 20000);
            let q_z1sq = simpson(|z| z * z * std_normal_pdf(z) * tail(z), a, 12.0, 20000);
            let q_z2 = simpson(
                |z| std_normal_pdf(z) * crate::gaussmath::truncated_first_moment(cond(z), b).unwrap(),
                a,
                12.0,
                20000,
            );
            let q_z2sq = simpson(
                |z| std_normal_pdf(z) * truncated_second_moment(cond(z), b).unwrap(),
                a,
                12.0,
                20000,
            );
            let q_z1z2 = simpson(
                |z| z * std_normal_pdf(z) * crate::gaussmath::truncated_first_moment(cond(z), b).unwrap(),
                a,
                12.0,
                20000,
            );
            let q_p = simpson(|z| std_normal_pdf(z) * tail(z), a, 12.0, 20000);
            for (got, want) in [
                (m.e_z1, q_z1),
                (m.e_z2, q_z2),
                (m.e_z1sq, q_z1sq),
                (m.e_z2sq, q_z2sq),
                (m.e_z1z2, q_z1z2),
                (m.prob, q_p),
            ] {
                assert!((got - want).abs() < 1e-10, "{a} {b} {rho}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn relu_product_examples() {
        let base = BivariateMomentParams {
            mu1: 0.0,
            kappa1: 1.0,
            mu2: 0.0,
            kappa2: 1.0,
            rho: 0.0,
            a: 0.0,
            b: 0.0,
        };
        assert!((relu_product_expectation(&base).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let far = BivariateMomentParams {
            mu1: 3.0,
            kappa1: 0.01,
            mu2: 3.0,
            kappa2: 0.01,
            rho: 0.2,
            ..base
        };
        let want = 9.0 + 0.01 * 0.01 * 0.2;
        assert!((relu_product_expectation(&far).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn degenerate_second_moment_examples() {
        let g = UnivariateGaussian::new(0.0, 1.0).unwrap();
        assert!((degenerate_relu_second_moment(g).unwrap() - 0.5).abs() < 1e-15);
        let g = UnivariateGaussian::new(5.0, 0.01).unwrap();
        assert!((degenerate_relu_second_moment(g).unwrap() - 25.0001).abs() < 1e-10);
    }

    #[test]
    fn continuity_at_degenerate_boundary() {
        let g = UnivariateGaussian::new(0.4, 0.8).unwrap();
        let p = BivariateMomentParams {
            mu1: 0.4,
            kappa1: 0.8,
            mu2: 0.4,
            kappa2: 0.8,
            rho: 1.0 - 1e-6,
            a: 0.0,
            b: 0.0,
        };
        let near = relu_product_expectation(&p).unwrap();
        assert!((near - degenerate_relu_second_moment(g).unwrap()).abs() <= 1e-4);
        let anti = BivariateMomentParams { rho: -(1.0 - 1e-6), ..p };
        let near = relu_product_expectation(&anti).unwrap();
        let limit = pair_moments(&BivariateMomentParams { rho: -1.0, ..p }).unwrap().e_z1z2;
        assert!((near - limit).abs() <= 1e-4);
    }

    #[test]
    fn gap_bound_examples() {
        assert_eq!(indicator_joint_gap_bound(0.0, 0.0), 2.0);
        let b = indicator_joint_gap_bound(4.0, 5.0);
        assert!((b - 2.0 * (-8.0f64).exp()).abs() < 1e-18);
        assert!(1.0 - bvn_cdf(4.0, 5.0, 0.0).unwrap() <= b);
        let b = indicator_joint_gap_bound(-4.0, 2.0);
        assert!(bvn_cdf(-4.0, 2.0, 0.0).unwrap() <= b);
    }
}
