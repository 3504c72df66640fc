//! Randomized comparison of every closed-form moment against Monte Carlo and,
//! where the domain is low dimensional, tensor Gauss-Legendre quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::{expected_indicator_vector, expected_second_moment_action};
use crate::bivariate::{coupled_standard_moments, relu_product_expectation, BivariateMomentParams};
use crate::error::Result;
use crate::gaussmath::{truncated_first_moment, truncated_second_moment, UnivariateGaussian};
use crate::linalg::{dot, norm2};
use crate::mc::{mc_expectation, DrawSpec};
use crate::seeding::{derive_seed, rng_for};

pub const MOMENT_NAMES: [&str; 6] = [
    "truncated_first_moment",
    "truncated_second_moment",
    "coupled_standard_moments",
    "relu_product_expectation",
    "expected_indicator_vector",
    "expected_second_moment_action",
];

/// Adds `delta` to one closed form before comparison (harness self-test).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub moment: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub moment: String,
    pub set: usize,
    pub component: usize,
    /// "mc" or "quadrature".
    pub oracle: String,
    pub closed_form: f64,
    pub oracle_value: f64,
    /// Allowed |closed_form - oracle_value|.
    pub tolerance: f64,
    pub pass: bool,
}

pub const MC_SIGMAS: f64 = 4.0;
pub const QUAD_TOL: f64 = 1e-8;
/// Monte Carlo cannot resolve events rarer than this at the sample sizes
/// used here; such sets are checked by quadrature only.
pub const MC_MIN_PROB: f64 = 1e-3;

struct Recorder<'a> {
    records: Vec<CheckRecord>,
    perturb: Option<&'a Perturbation>,
}

impl Recorder<'_> {
    fn shift(&self, moment: &str) -> f64 {
        match self.perturb {
            Some(p) if p.moment == moment => p.delta,
            _ => 0.0,
        }
    }

    fn push(&mut self, moment: &str, set: usize, oracle: &str, closed: &[f64], truth: &[f64], tol: &[f64]) {
        let shift = self.shift(moment);
        for (k, ((&c, &t), &tl)) in closed.iter().zip(truth).zip(tol).enumerate() {
            let c = c + shift;
            self.records.push(CheckRecord {
                moment: moment.to_string(),
                set,
                component: k,
                oracle: oracle.to_string(),
                closed_form: c,
                oracle_value: t,
                tolerance: tl,
                pass: (c - t).abs() <= tl,
            });
        }
    }
}

fn mc_tol(se: &[f64]) -> Vec<f64> {
    se.iter().map(|s| MC_SIGMAS * s + 1e-14).collect()
}

/// Composite Gauss-Legendre on [lo, hi] with `panels` 20-point panels.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let rule = gl20();
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        let mut s = 0.0;
        for &(x, w) in rule {
            s += w * f(mid + 0.5 * h * x);
        }
        total += 0.5 * h * s;
    }
    total
}

/// 20-point Gauss-Legendre nodes and weights by Newton iteration.
fn gl20() -> &'static [(f64, f64)] {
    static RULE: std::sync::OnceLock<Vec<(f64, f64)>> = std::sync::OnceLock::new();
    RULE.get_or_init(|| {
        let n = 20;
        (0..n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
                let mut dp = 1.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for k in 2..=n {
                        let kf = k as f64;
                        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    })
}

fn normal_density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Integral of g(z1, z2) times the standard bivariate density with
/// correlation rho over [a, inf) x [b, inf), truncated at 12 sd.
fn bivariate_quadrature<const K: usize>(a: f64, b: f64, rho: f64, g: impl Fn(f64, f64) -> [f64; K]) -> [f64; K] {
    let sq = (1.0 - rho * rho).sqrt();
    let lo1 = a.max(-12.0);
    let mut out = [0.0; K];
    if lo1 >= 12.0 {
        return out;
    }
    for k in 0..K {
        out[k] = integrate(
            |z1| {
                // z2 | z1 ~ N(rho z1, sq^2): integrate over z2 >= b within 12 sd.
                let lo2 = b.max(rho * z1 - 12.0 * sq);
                let hi2 = rho * z1 + 12.0 * sq;
                if lo2 >= hi2 {
                    return 0.0;
                }
                let inner = integrate(
                    |z2| g(z1, z2)[k] * normal_density((z2 - rho * z1) / sq) / sq,
                    lo2,
                    hi2,
                    12,
                );
                normal_density(z1) * inner
            },
            lo1,
            12.0,
            48,
        );
    }
    out
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Runs `n_sets` randomized parameter sets; returns every comparison.
pub fn moment_check_suite(
    n_sets: usize,
    mc_samples: u64,
    seed: u64,
    perturb: Option<&Perturbation>,
) -> Result<Vec<CheckRecord>> {
    let mut rec = Recorder {
        records: Vec::new(),
        perturb,
    };
    for set in 0..n_sets {
        let mut rng = rng_for(seed, &[set as u64, 0]);
        let mc_seed = |k: u64| derive_seed(seed, &[set as u64, 1, k]);

        // Univariate truncated moments.
        let (mu, kappa, a) = (uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, 0.2, 2.0), uniform(&mut rng, -2.0, 2.0));
        let g = UnivariateGaussian::new(mu, kappa)?;
        let closed = [truncated_first_moment(g, a)?, truncated_second_moment(g, a)?];
        let est = mc_expectation(DrawSpec { len: 1, mean: mu, std: kappa }, 2, mc_samples, mc_seed(0), |z, o| {
            let ind = if z[0] >= a { 1.0 } else { 0.0 };
            o[0] = z[0] * ind;
            o[1] = z[0] * z[0] * ind;
        })?;
        let lo = a.max(mu - 12.0 * kappa);
        let hi = mu + 12.0 * kappa;
        let quad: Vec<f64> = (0..=2)
            .map(|p| {
                if lo >= hi {
                    0.0
                } else {
                    integrate(|z| z.powi(p) * normal_density((z - mu) / kappa) / kappa, lo, hi, 64)
                }
            })
            .collect();
        for (k, name) in MOMENT_NAMES[..2].iter().enumerate() {
            if quad[0] >= MC_MIN_PROB {
                rec.push(name, set, "mc", &closed[k..=k], &est.mean[k..=k], &mc_tol(&est.std_error[k..=k]));
            }
            rec.push(name, set, "quadrature", &closed[k..=k], &quad[k + 1..=k + 1], &[QUAD_TOL]);
        }

        // Standard coupled moments.
        let (ca, cb, rho) = (uniform(&mut rng, -1.5, 1.5), uniform(&mut rng, -1.5, 1.5), uniform(&mut rng, -0.95, 0.95));
        let cm = coupled_standard_moments(ca, cb, rho)?;
        let closed = [cm.e_z1, cm.e_z2, cm.e_z1sq, cm.e_z2sq, cm.e_z1z2, cm.prob];
        let sq = (1.0 - rho * rho).sqrt();
        let stat = |z1: f64, z2: f64| [z1, z2, z1 * z1, z2 * z2, z1 * z2, 1.0];
        let est = mc_expectation(DrawSpec::standard(2), 6, mc_samples, mc_seed(1), |xi, o| {
            let (z1, z2) = (xi[0], rho * xi[0] + sq * xi[1]);
            let ind = if z1 >= ca && z2 >= cb { 1.0 } else { 0.0 };
            for (ok, v) in o.iter_mut().zip(stat(z1, z2)) {
                *ok = v * ind;
            }
        })?;
        let quad = bivariate_quadrature(ca, cb, rho, stat);
        if quad[5] >= MC_MIN_PROB {
            rec.push(MOMENT_NAMES[2], set, "mc", &closed, &est.mean, &mc_tol(&est.std_error));
        }
        rec.push(MOMENT_NAMES[2], set, "quadrature", &closed, &quad, &[QUAD_TOL; 6]);

        // General-pair relu product.
        let p = BivariateMomentParams {
            mu1: uniform(&mut rng, -1.0, 1.0),
            kappa1: uniform(&mut rng, 0.3, 1.5),
            mu2: uniform(&mut rng, -1.0, 1.0),
            kappa2: uniform(&mut rng, 0.3, 1.5),
            rho: uniform(&mut rng, -0.9, 0.9),
            a: uniform(&mut rng, -1.0, 1.0),
            b: uniform(&mut rng, -1.0, 1.0),
        };
        let closed = [relu_product_expectation(&p)?];
        let psq = (1.0 - p.rho * p.rho).sqrt();
        let est = mc_expectation(DrawSpec::standard(2), 1, mc_samples, mc_seed(2), |xi, o| {
            let z1 = p.mu1 + p.kappa1 * xi[0];
            let z2 = p.mu2 + p.kappa2 * (p.rho * xi[0] + psq * xi[1]);
            o[0] = if z1 >= p.a && z2 >= p.b { z1 * z2 } else { 0.0 };
        })?;
        let (ha, hb) = ((p.a - p.mu1) / p.kappa1, (p.b - p.mu2) / p.kappa2);
        let quad = bivariate_quadrature(ha, hb, p.rho, |s1, s2| [(p.mu1 + p.kappa1 * s1) * (p.mu2 + p.kappa2 * s2), 1.0]);
        if quad[1] >= MC_MIN_PROB {
            rec.push(MOMENT_NAMES[3], set, "mc", &closed, &est.mean, &mc_tol(&est.std_error));
        }
        rec.push(MOMENT_NAMES[3], set, "quadrature", &closed, &quad[..1], &[QUAD_TOL]);

        // Vector expectations under c ~ N(mu, kappa^2 I).
        let d = 2 + set % 3;
        let mu_v: Vec<f64> = (0..d).map(|_| uniform(&mut rng, 0.5, 1.5)).collect();
        let kv = uniform(&mut rng, 0.1, 1.0);
        // Directions are redrawn until each event {c.u >= 0} has standardized
        // threshold in [-1.5, 3] and the pair is not strongly anti-correlated,
        // so the estimates see enough hits for a meaningful standard error.
        let t_of = |w: &[f64]| dot(&mu_v, w) / (kv * norm2(w));
        let draw_dir = |rng: &mut rand_chacha::ChaCha8Rng| loop {
            let w: Vec<f64> = (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect();
            if norm2(&w) > 1e-3 && (-1.5..=3.0).contains(&t_of(&w)) {
                return w;
            }
        };
        let u = draw_dir(&mut rng);
        let v: Vec<f64> = match set % 10 {
            // Exactly parallel and anti-parallel directions exercise the
            // one-variable conditioning branch.
            3 => u.clone(),
            7 => u.iter().map(|x| -0.5 * x).collect(),
            _ => loop {
                let v = draw_dir(&mut rng);
                if dot(&u, &v) / (norm2(&u) * norm2(&v)) >= -0.8 {
                    break v;
                }
            },
        };
        let closed = expected_indicator_vector(&mu_v, kv, &u)?;
        let est = mc_expectation(DrawSpec::standard(d), d, mc_samples, mc_seed(3), |xi, o| {
            let c: Vec<f64> = mu_v.iter().zip(xi).map(|(m, x)| m + kv * x).collect();
            let ind = if dot(&c, &u) >= 0.0 { 1.0 } else { 0.0 };
            for (ok, ck) in o.iter_mut().zip(&c) {
                *ok = ck * ind;
            }
        })?;
        rec.push(MOMENT_NAMES[4], set, "mc", &closed, &est.mean, &mc_tol(&est.std_error));

        let closed = expected_second_moment_action(&mu_v, kv, &u, &v)?;
        let est = mc_expectation(DrawSpec::standard(d), d, mc_samples, mc_seed(4), |xi, o| {
            let c: Vec<f64> = mu_v.iter().zip(xi).map(|(m, x)| m + kv * x).collect();
            let (z1, z2) = (dot(&c, &u), dot(&c, &v));
            let w = if z1 >= 0.0 && z2 >= 0.0 { z2 } else { 0.0 };
            for (ok, ck) in o.iter_mut().zip(&c) {
                *ok = ck * w;
            }
        })?;
        rec.push(MOMENT_NAMES[5], set, "mc", &closed, &est.mean, &mc_tol(&est.std_error));
    }
    Ok(rec.records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_rule_is_exact_on_polynomials() {
        let v = integrate(|x| x.powi(7) - 3.0 * x * x, -1.0, 2.0, 1);
        let want = (2f64.powi(8) - 1.0) / 8.0 - (8.0 + 1.0);
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn small_suite_passes_and_perturbation_is_caught() {
        let records = moment_check_suite(3, 20_000, 5, None).unwrap();
        assert!(records.iter().all(|r| r.pass), "{:?}", records.iter().find(|r| !r.pass));
        let p = Perturbation {
            moment: "truncated_first_moment".into(),
            delta: 1e-3,
        };
        let records = moment_check_suite(1, 20_000, 5, Some(&p)).unwrap();
        let failed: Vec<&str> = records.iter().filter(|r| !r.pass).map(|r| r.moment.as_str()).collect();
        assert!(!failed.is_empty());
        assert!(failed.iter().all(|m| *m == "truncated_first_moment"));
    }
}
