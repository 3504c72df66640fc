//! Closed-form expectations over the input masks: smoothed activation,
//! exact expected loss and gradient, their smoothed-plus-regularizer
//! decompositions and the associated residual bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bivariate::{pair_moments, BivariateMomentParams, EPS_RHO};
use crate::error::{check_finite, check_nonnegative, check_positive, Error, Result};
use crate::gaussmath::{
    abs_sq_exp_psi, sq_exp_phi, standard_interval_moments, std_normal_cdf, std_normal_pdf,
    truncated_first_moment, truncated_second_moment, UnivariateGaussian,
};
use crate::linalg::{dot, hadamard, max_singular_value, norm2, norm_inf, pairwise_sum,
    pairwise_sum_vecs, Matrix};
use crate::model::{clean_gradient, clean_loss, relu, Dataset, NetworkState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefQuantities {
    pub b_x: f64,
    pub b_y: f64,
    pub r_w: f64,
    pub r_u: f64,
    pub phi_max: f64,
    pub psi_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub exact: f64,
    pub t1_smoothed: f64,
    pub t2_regularizer: f64,
    pub residual: f64,
    pub residual_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientDecomposition {
    pub clean_grad_row: Vec<f64>,
    pub t3_row: Vec<f64>,
    pub exact_expected_row: Vec<f64>,
    pub residual_row: Vec<f64>,
    pub residual_bound: f64,
}

/// Rounding allowance for bound comparisons: the residual is a difference of
/// terms of size `scale`, so it carries absolute error of order eps * scale
/// even when the true residual is far below the bound.
const ROUNDING_SLACK: f64 = 64.0 * f64::EPSILON;

impl LossBreakdown {
    pub fn within_bound(&self) -> bool {
        let scale = self.exact.abs() + self.t1_smoothed.abs() + self.t2_regularizer.abs();
        self.residual.abs() <= self.residual_bound + ROUNDING_SLACK * scale
    }
}

impl GradientDecomposition {
    pub fn residual_norm(&self) -> f64 {
        norm2(&self.residual_row)
    }

    pub fn within_bound(&self) -> bool {
        let scale = norm2(&self.exact_expected_row) + norm2(&self.clean_grad_row) + norm2(&self.t3_row);
        self.residual_norm() <= self.residual_bound + ROUNDING_SLACK * scale
    }
}

/// (z, s) = (w.x, kappa ||w * x||): mean and standard deviation of the masked
/// preactivation.
fn preactivation(w: &[f64], x: &[f64], kappa: f64) -> (f64, f64) {
    let u = hadamard(w, x);
    (u.iter().sum(), kappa * norm2(&u))
}

/// z Phi(z / s). With s = 0 this is relu(z).
fn smoothed_from(z: f64, s: f64) -> f64 {
    if s > 0.0 {
        z * std_normal_cdf(z / s)
    } else {
        relu(z)
    }
}

/// sigma_hat(w, x) = w.x Phi(w.x / (kappa ||w * x||)).
pub fn smoothed_activation(w: &[f64], x: &[f64], kappa: f64) -> Result<f64> {
    check_nonnegative("kappa", kappa)?;
    check_same_len(w, x, "w and x")?;
    let (z, s) = preactivation(w, x, kappa);
    Ok(smoothed_from(z, s))
}

/// E_c[relu(w.(x * c))] = s pdf(z/s) + z Phi(z/s).
pub fn exact_masked_activation_expectation(w: &[f64], x: &[f64], kappa: f64) -> Result<f64> {
    check_nonnegative("kappa", kappa)?;
    check_same_len(w, x, "w and x")?;
    let (z, s) = preactivation(w, x, kappa);
    if s > 0.0 {
        Ok(s * std_normal_pdf(z / s) + z * std_normal_cdf(z / s))
    } else {
        Ok(relu(z))
    }
}

/// f_hat(W, x) = (1/sqrt m) sum_r a_r sigma_hat(w_r, x).
pub fn smoothed_network(net: &NetworkState, x: &[f64], kappa: f64) -> Result<f64> {
    check_nonnegative("kappa", kappa)?;
    check_same_len(net.row(0), x, "network and input")?;
    Ok(smoothed_network_unchecked(net, x, kappa))
}

fn smoothed_network_unchecked(net: &NetworkState, x: &[f64], kappa: f64) -> f64 {
    let s: f64 = (0..net.m())
        .map(|r| {
            let (z, s) = preactivation(net.row(r), x, kappa);
            net.a[r] * smoothed_from(z, s)
        })
        .sum();
    s / (net.m() as f64).sqrt()
}

/// Argument z / (2 s) of phi and psi. A zero spread gives 0 when z = 0 too
/// (the conservative choice phi = 1) and +-inf otherwise.
fn phi_argument(z: f64, s: f64) -> f64 {
    if s > 0.0 {
        z / (2.0 * s)
    } else if z == 0.0 {
        0.0
    } else {
        z.signum() * f64::INFINITY
    }
}

pub fn def_quantities(net: &NetworkState, data: &Dataset, kappa: f64) -> Result<DefQuantities> {
    check_nonnegative("kappa", kappa)?;
    net.check_data(data)?;
    let mut q = DefQuantities {
        b_x: 0.0,
        b_y: 0.0,
        r_w: 0.0,
        r_u: 0.0,
        phi_max: 0.0,
        psi_max: 0.0,
    };
    for i in 0..data.n() {
        q.b_x = q.b_x.max(norm_inf(data.x(i)));
        q.b_y = q.b_y.max(data.targets[i].abs());
    }
    for r in 0..net.m() {
        let w = net.row(r);
        q.r_w = q.r_w.max(norm2(w));
        for i in 0..data.n() {
            let u = hadamard(w, data.x(i));
            let nu = norm2(&u);
            q.r_u = q.r_u.max(nu);
            let t = phi_argument(u.iter().sum(), kappa * nu);
            let (phi, psi) = if t.is_finite() {
                (sq_exp_phi(t), abs_sq_exp_psi(t))
            } else {
                (0.0, 0.0)
            };
            q.phi_max = q.phi_max.max(phi);
            q.psi_max = q.psi_max.max(psi);
        }
    }
    Ok(q)
}

/// Masked directions u_{i,r} = w_r * x_i for one sample, rejecting zeros.
fn directions(net: &NetworkState, x: &[f64], i: usize) -> Result<Vec<Vec<f64>>> {
    (0..net.m())
        .map(|r| {
            let u = hadamard(net.row(r), x);
            if norm2(&u) == 0.0 {
                Err(Error::DegenerateDirection { i, r })
            } else {
                Ok(u)
            }
        })
        .collect()
}

/// E_C[L_C(W)] in closed form. kappa = 0 returns the clean loss.
pub fn expected_loss_exact(net: &NetworkState, data: &Dataset, kappa: f64) -> Result<f64> {
    check_nonnegative("kappa", kappa)?;
    net.check_data(data)?;
    if kappa == 0.0 {
        return clean_loss(net, data);
    }
    let per_sample = (0..data.n())
        .into_par_iter()
        .map(|i| sample_expected_loss(net, data.x(i), data.targets[i], kappa, i))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_sample))
}

/// 1/2 (E[f^2] - 2 y E[f] + y^2) for one sample.
fn sample_expected_loss(net: &NetworkState, x: &[f64], y: f64, kappa: f64, i: usize) -> Result<f64> {
    let m = net.m();
    let us = directions(net, x, i)?;
    let means: Vec<f64> = us.iter().map(|u| u.iter().sum()).collect();
    let norms: Vec<f64> = us.iter().map(|u| norm2(u)).collect();
    let mut first = Vec::with_capacity(m);
    let mut second = Vec::with_capacity(m * (m + 1) / 2);
    for r in 0..m {
        let g = UnivariateGaussian::new(means[r], kappa * norms[r])?;
        first.push(net.a[r] * truncated_first_moment(g, 0.0)?);
        second.push(truncated_second_moment(g, 0.0)?);
        for q in 0..r {
            let rho = (dot(&us[r], &us[q]) / (norms[r] * norms[q])).clamp(-1.0, 1.0);
            let p = BivariateMomentParams {
                mu1: means[r],
                kappa1: kappa * norms[r],
                mu2: means[q],
                kappa2: kappa * norms[q],
                rho,
                a: 0.0,
                b: 0.0,
            };
            second.push(2.0 * net.a[r] * net.a[q] * pair_moments(&p)?.e_z1z2);
        }
    }
    let mf = m as f64;
    let ef = pairwise_sum(&first) / mf.sqrt();
    let ef2 = pairwise_sum(&second) / mf;
    Ok(0.5 * (ef2 - 2.0 * y * ef + y * y))
}

/// Loss split into smoothed loss, regularizer and residual, with the
/// residual bound mn(kappa^2 R_u^2 psi_max^2 + (kappa^2 R_u^2 + kappa R_w) phi_max^2).
pub fn expected_loss_decomposition(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
) -> Result<LossBreakdown> {
    let q = def_quantities(net, data, kappa)?;
    check_target_hypothesis(net, &q)?;
    let exact = expected_loss_exact(net, data, kappa)?;
    let m = net.m() as f64;
    let mut t1 = Vec::with_capacity(data.n());
    let mut t2 = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let x = data.x(i);
        let e = smoothed_network_unchecked(net, x, kappa) - data.targets[i];
        t1.push(0.5 * e * e);
        let mut acc = vec![0.0; data.d()];
        for r in 0..net.m() {
            let u = hadamard(net.row(r), x);
            let (z, s) = (u.iter().sum::<f64>(), kappa * norm2(&u));
            let weight = if s > 0.0 {
                std_normal_cdf(z / s)
            } else if z >= 0.0 {
                1.0
            } else {
                0.0
            };
            for (acc_k, u_k) in acc.iter_mut().zip(&u) {
                *acc_k += net.a[r] * weight * u_k;
            }
        }
        t2.push(dot(&acc, &acc));
    }
    let t1_smoothed = pairwise_sum(&t1);
    let t2_regularizer = kappa * kappa / (2.0 * m) * pairwise_sum(&t2);
    let mn = m * data.n() as f64;
    let k2ru2 = kappa * kappa * q.r_u * q.r_u;
    let residual_bound =
        mn * (k2ru2 * q.psi_max * q.psi_max + (k2ru2 + kappa * q.r_w) * q.phi_max * q.phi_max);
    Ok(LossBreakdown {
        exact,
        t1_smoothed,
        t2_regularizer,
        residual: exact - t1_smoothed - t2_regularizer,
        residual_bound,
    })
}

fn check_target_hypothesis(net: &NetworkState, q: &DefQuantities) -> Result<()> {
    let cap = 3.0 * (net.m() as f64).sqrt() * q.r_w;
    if q.b_y > cap {
        return Err(Error::Hypothesis(format!(
            "B_y = {} exceeds 3 sqrt(m) R_w = {}",
            q.b_y, cap
        )));
    }
    Ok(())
}

/// Gram data of (u, v): (uu, uv, vv, det).
fn gram(u: &[f64], v: &[f64]) -> Result<(f64, f64, f64, f64)> {
    check_same_len(u, v, "u and v")?;
    let (uu, uv, vv) = (dot(u, u), dot(u, v), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector("conditioning direction"));
    }
    let det = uu * vv - uv * uv;
    if det <= 1e-12 * uu * vv {
        return Err(Error::ParallelDirections);
    }
    Ok((uu, uv, vv, det))
}

/// Regression coefficients (s1, s2) of c on (c.u, c.v).
fn regression_coefficients(u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (uu, uv, vv, det) = gram(u, v)?;
    let s1 = u.iter().zip(v).map(|(a, b)| (vv * a - uv * b) / det).collect();
    let s2 = u.iter().zip(v).map(|(a, b)| (uu * b - uv * a) / det).collect();
    Ok((s1, s2))
}

/// E[c | c.u = z1, c.v = z2] for c ~ N(mu, kappa^2 I).
pub fn conditional_mean(
    mu: &[f64],
    kappa: f64,
    u: &[f64],
    v: &[f64],
    z1: f64,
    z2: f64,
) -> Result<Vec<f64>> {
    check_positive("kappa", kappa)?;
    check_same_len(mu, u, "mu and u")?;
    let (s1, s2) = regression_coefficients(u, v)?;
    let d1 = z1 - dot(mu, u);
    let d2 = z2 - dot(mu, v);
    Ok(mu
        .iter()
        .zip(s1.iter().zip(&s2))
        .map(|(m, (a, b))| m + a * d1 + b * d2)
        .collect())
}

/// Cov[c | c.u, c.v] = kappa^2 (I - P), P the orthogonal projector onto span{u, v}.
pub fn conditional_cov(kappa: f64, u: &[f64], v: &[f64]) -> Result<Matrix> {
    check_positive("kappa", kappa)?;
    let (s1, s2) = regression_coefficients(u, v)?;
    let d = u.len();
    let k2 = kappa * kappa;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let proj = s1[i] * u[j] + s2[i] * v[j];
            out[(i, j)] = k2 * (if i == j { 1.0 } else { 0.0 } - proj);
        }
    }
    // Symmetric in exact arithmetic; remove rounding asymmetry.
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    Ok(out)
}

/// E[c 1{c.u >= 0}] = mu Phi(t) + kappa pdf(t) u / ||u||, t = mu.u / (kappa ||u||).
pub fn expected_indicator_vector(mu: &[f64], kappa: f64, u: &[f64]) -> Result<Vec<f64>> {
    check_positive("kappa", kappa)?;
    check_same_len(mu, u, "mu and u")?;
    let nu = norm2(u);
    if nu == 0.0 {
        return Err(Error::ZeroVector("u"));
    }
    let t = dot(mu, u) / (kappa * nu);
    let (p, dens) = (std_normal_cdf(t), std_normal_pdf(t));
    Ok(mu
        .iter()
        .zip(u)
        .map(|(m, uk)| m * p + kappa * dens * uk / nu)
        .collect())
}

/// E[c c^T 1{c.u >= 0, c.v >= 0}] v for c ~ N(mu, kappa^2 I).
pub fn expected_second_moment_action(
    mu: &[f64],
    kappa: f64,
    u: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_positive("kappa", kappa)?;
    check_same_len(mu, u, "mu and u")?;
    check_same_len(u, v, "u and v")?;
    let (nu, nv) = (norm2(u), norm2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector("u or v"));
    }
    let (m1, m2) = (dot(mu, u), dot(mu, v));
    let (sd1, sd2) = (kappa * nu, kappa * nv);
    let rho = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);

    if rho.abs() >= 1.0 - EPS_RHO {
        // c.v is (anti)proportional to c.u: condition on c.u alone, where
        // E[c | c.u] = mu + kappa u_hat zeta with zeta standard.
        let lo = -m1 / sd1;
        let (p, e1, e2, sign) = if rho > 0.0 {
            let (p, e1, e2) = standard_interval_moments(lo.max(-m2 / sd2), f64::INFINITY);
            (p, e1, e2, 1.0)
        } else {
            let (p, e1, e2) = standard_interval_moments(lo, m2 / sd2);
            (p, e1, e2, -1.0)
        };
        let along_mu = m2 * p + sign * sd2 * e1;
        let along_u = m2 * e1 + sign * sd2 * e2;
        return Ok(mu
            .iter()
            .zip(u)
            .map(|(m, uk)| m * along_mu + kappa * uk / nu * along_u)
            .collect());
    }

    let pm = pair_moments(&BivariateMomentParams {
        mu1: m1,
        kappa1: sd1,
        mu2: m2,
        kappa2: sd2,
        rho,
        a: 0.0,
        b: 0.0,
    })?;
    // E[c | z1, z2] = mu + s1 (z1 - m1) + s2 (z2 - m2), multiplied by z2 1{..}.
    let (s1, s2) = regression_coefficients(u, v)?;
    let c1 = pm.e_z1z2 - m1 * pm.e_z2;
    let c2 = pm.e_z2sq - m2 * pm.e_z2;
    Ok((0..mu.len())
        .map(|k| mu[k] * pm.e_z2 + s1[k] * c1 + s2[k] * c2)
        .collect())
}

/// E_C[grad_{w_r} L_C(W)] in closed form. kappa = 0 returns the clean row.
pub fn expected_gradient_exact(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
    r: usize,
) -> Result<Vec<f64>> {
    check_nonnegative("kappa", kappa)?;
    net.check_data(data)?;
    check_row(net, r)?;
    if kappa == 0.0 {
        return Ok(clean_gradient(net, data)?.row(r).to_vec());
    }
    let d = data.d();
    let ones = vec![1.0; d];
    let sqrt_m = (net.m() as f64).sqrt();
    let per_sample = (0..data.n())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let x = data.x(i);
            let us = directions(net, x, i)?;
            let mut inner = vec![0.0; d];
            for q in 0..net.m() {
                let act = expected_second_moment_action(&ones, kappa, &us[r], &us[q])?;
                for (acc, v) in inner.iter_mut().zip(&act) {
                    *acc += net.a[q] * v / sqrt_m;
                }
            }
            let ind = expected_indicator_vector(&ones, kappa, &us[r])?;
            let y = data.targets[i];
            Ok((0..d)
                .map(|k| net.a[r] / sqrt_m * x[k] * (inner[k] - y * ind[k]))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let g = pairwise_sum_vecs(&per_sample, d);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate(format!("non-finite expected gradient for row {r}")));
    }
    Ok(g)
}

/// (3 kappa^2 a_r / m) sum_i sum_r' a_r' x_i^2 * w_r' 1{w_r.x_i >= 0} 1{w_r'.x_i >= 0}.
pub fn regularizer_t3(net: &NetworkState, data: &Dataset, kappa: f64, r: usize) -> Result<Vec<f64>> {
    check_nonnegative("kappa", kappa)?;
    net.check_data(data)?;
    check_row(net, r)?;
    let d = data.d();
    let mut out = vec![0.0; d];
    if kappa == 0.0 {
        return Ok(out);
    }
    for i in 0..data.n() {
        let x = data.x(i);
        if dot(net.row(r), x) < 0.0 {
            continue;
        }
        for q in 0..net.m() {
            let wq = net.row(q);
            if dot(wq, x) >= 0.0 {
                for k in 0..d {
                    out[k] += net.a[q] * x[k] * x[k] * wq[k];
                }
            }
        }
    }
    let scale = 3.0 * kappa * kappa * net.a[r] / net.m() as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Splits the expected gradient of row r into clean gradient, T3 and residual.
/// Requires kappa <= 1.
pub fn gradient_decomposition(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
    r: usize,
) -> Result<GradientDecomposition> {
    check_nonnegative("kappa", kappa)?;
    if kappa > 1.0 {
        return Err(Error::Hypothesis(format!("kappa = {kappa} exceeds 1")));
    }
    check_row(net, r)?;
    let q = def_quantities(net, data, kappa)?;
    let clean = clean_gradient(net, data)?;
    let clean_grad_row = clean.row(r).to_vec();
    let t3_row = regularizer_t3(net, data, kappa, r)?;
    let exact_expected_row = expected_gradient_exact(net, data, kappa, r)?;
    let residual_row = (0..data.d())
        .map(|k| exact_expected_row[k] - clean_grad_row[k] - t3_row[k])
        .collect();
    let n = data.n() as f64;
    let sqrt_d = (data.d() as f64).sqrt();
    let loss = clean_loss(net, data)?;
    let sigma = max_singular_value(&data.inputs)?;
    let residual_bound = (6.0 * n * kappa * kappa * q.b_x * q.b_x * q.r_w
        + 5.0 * n * kappa * q.r_u * sqrt_d)
        * q.phi_max
        + sigma / (net.m() as f64).sqrt() * q.phi_max * loss.sqrt()
        + 6.0 * n * kappa * q.r_u * q.psi_max;
    Ok(GradientDecomposition {
        clean_grad_row,
        t3_row,
        exact_expected_row,
        residual_row,
        residual_bound,
    })
}

/// (eps1, eps2, eps3) evaluated with unit leading constants.
pub fn epsilon_bounds(net: &NetworkState, data: &Dataset, kappa: f64) -> Result<(f64, f64, f64)> {
    let q = def_quantities(net, data, kappa)?;
    check_target_hypothesis(net, &q)?;
    let sigma = max_singular_value(&data.inputs)?;
    Ok(epsilon_from_quantities(&q, kappa, net.m(), data.n(), data.d(), sigma))
}

/// The epsilon expressions for given quantities; public so callers can freeze
/// phi_max / psi_max while varying kappa.
pub fn epsilon_from_quantities(
    q: &DefQuantities,
    kappa: f64,
    m: usize,
    n: usize,
    d: usize,
    sigma_max: f64,
) -> (f64, f64, f64) {
    let (mf, nf) = (m as f64, n as f64);
    let k2 = kappa * kappa;
    let ru2 = q.r_u * q.r_u;
    let eps1 = 2.0 * mf * nf * k2 * ru2
        + mf * nf * (k2 * ru2 + kappa * q.r_w) * q.phi_max * q.phi_max
        + mf * nf * k2 * (ru2 + 1.0) * q.psi_max * q.psi_max;
    let bx2 = q.b_x * q.b_x;
    let eps2 = (nf * k2 * bx2 * q.r_w + nf * kappa * q.r_u * (d as f64).sqrt()) * q.phi_max
        + nf * kappa * q.r_u * q.psi_max
        + k2 * mf.sqrt() * bx2 * q.r_w;
    let eps3 = sigma_max * q.phi_max / mf.sqrt();
    (eps1, eps2, eps3)
}

fn check_same_len(a: &[f64], b: &[f64], context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context,
        });
    }
    for &v in a.iter().chain(b) {
        check_finite("vector entry", v)?;
    }
    Ok(())
}

fn check_row(net: &NetworkState, r: usize) -> Result<()> {
    if r >= net.m() {
        return Err(Error::DimensionMismatch {
            expected: net.m(),
            got: r,
            context: "neuron index out of range",
        });
    }
    Ok(())
}
