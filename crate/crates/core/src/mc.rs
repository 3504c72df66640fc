//! Seeded Monte Carlo estimates of mask expectations.
//!
//! Draws are split into chunks of `CHUNK` samples; chunk j uses its own
//! stream keyed by (seed, j) and the chunk summaries are merged in a fixed
//! pairwise tree, so the estimate does not depend on the thread count.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_nonnegative, Error, Result};
use crate::linalg::dot;
use crate::model::{forward_unchecked, relu, Dataset, NetworkState};
use crate::seeding::rng_for;

pub const CHUNK: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub n_samples: u64,
    pub seed: u64,
}

impl McEstimate {
    /// First component, for scalar statistics.
    pub fn value(&self) -> f64 {
        self.mean[0]
    }

    pub fn se(&self) -> f64 {
        self.std_error[0]
    }

    /// Whether `truth` lies within `k` standard errors in every component.
    /// A zero standard error requires agreement to a few ulps.
    pub fn covers(&self, truth: &[f64], k: f64) -> bool {
        self.mean
            .iter()
            .zip(&self.std_error)
            .zip(truth)
            .all(|((m, se), t)| (m - t).abs() <= k * se + 8.0 * f64::EPSILON * t.abs().max(m.abs()))
    }
}

/// Each draw is a vector of `len` i.i.d. N(mean, std^2) entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawSpec {
    pub len: usize,
    pub mean: f64,
    pub std: f64,
}

impl DrawSpec {
    /// Mask entries N(1, kappa^2).
    pub fn masks(len: usize, kappa: f64) -> Self {
        DrawSpec {
            len,
            mean: 1.0,
            std: kappa,
        }
    }

    pub fn standard(len: usize) -> Self {
        DrawSpec {
            len,
            mean: 0.0,
            std: 1.0,
        }
    }
}

/// Running (count, mean, sum of squared deviations) per component.
#[derive(Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    fn merge(a: Moments, b: Moments) -> Moments {
        if a.count == 0.0 {
            return b;
        }
        if b.count == 0.0 {
            return a;
        }
        let n = a.count + b.count;
        let mut out = Moments::new(a.mean.len());
        out.count = n;
        for k in 0..a.mean.len() {
            let delta = b.mean[k] - a.mean[k];
            out.mean[k] = a.mean[k] + delta * (b.count / n);
            out.m2[k] = a.m2[k] + b.m2[k] + delta * delta * a.count * b.count / n;
        }
        out
    }
}

fn merge_tree(parts: &[Moments]) -> Moments {
    match parts.len() {
        1 => parts[0].clone(),
        n => {
            let mid = n / 2;
            Moments::merge(merge_tree(&parts[..mid]), merge_tree(&parts[mid..]))
        }
    }
}

/// Sample mean and standard error of `statistic` over `n_samples` draws.
/// `statistic(draw, out)` writes a `dim`-vector into `out`.
pub fn mc_expectation<F>(
    spec: DrawSpec,
    dim: usize,
    n_samples: u64,
    seed: u64,
    statistic: F,
) -> Result<McEstimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    if n_samples < 2 {
        return Err(Error::InvalidParameter {
            name: "n_samples",
            value: n_samples as f64,
            reason: "need at least 2 draws",
        });
    }
    check_finite("mean", spec.mean)?;
    check_nonnegative("std", spec.std)?;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let parts = (0..n_chunks)
        .into_par_iter()
        .map(|j| -> Result<Moments> {
            let mut rng = rng_for(seed, &[j]);
            let start = j * CHUNK;
            let end = (start + CHUNK).min(n_samples);
            let mut draw = vec![spec.mean; spec.len];
            let mut out = vec![0.0; dim];
            let mut acc = Moments::new(dim);
            for index in start..end {
                if spec.std > 0.0 {
                    for v in draw.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        *v = spec.mean + spec.std * g;
                    }
                }
                statistic(&draw, &mut out);
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { index });
                }
                acc.push(&out);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = merge_tree(&parts);
    let n = total.count;
    let std_error = total
        .m2
        .iter()
        .map(|s| (s.max(0.0) / (n - 1.0)).sqrt() / n.sqrt())
        .collect();
    Ok(McEstimate {
        mean: total.mean,
        std_error,
        n_samples,
        seed,
    })
}

fn check_shapes(net: &NetworkState, data: &Dataset, kappa: f64) -> Result<()> {
    check_nonnegative("kappa", kappa)?;
    net.check_data(data)
}

/// Masked inputs and residuals for one batch of masks (flattened n x d).
fn batch_residuals(net: &NetworkState, data: &Dataset, masks: &[f64], xc: &mut [f64], res: &mut [f64]) {
    let d = data.d();
    for i in 0..data.n() {
        let row = &mut xc[i * d..(i + 1) * d];
        for ((o, x), c) in row.iter_mut().zip(data.x(i)).zip(&masks[i * d..(i + 1) * d]) {
            *o = x * c;
        }
        res[i] = forward_unchecked(net, row) - data.targets[i];
    }
}

/// Estimate of E_C[L_C(W)] from `n_batches` independent mask batches.
pub fn mc_masked_loss(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
    n_batches: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_shapes(net, data, kappa)?;
    let (n, d) = (data.n(), data.d());
    mc_expectation(DrawSpec::masks(n * d, kappa), 1, n_batches, seed, |masks, out| {
        let mut xc = vec![0.0; n * d];
        let mut res = vec![0.0; n];
        batch_residuals(net, data, masks, &mut xc, &mut res);
        out[0] = 0.5 * res.iter().map(|e| e * e).sum::<f64>();
    })
}

/// Estimate of E_C[grad_{w_r} L_C(W)].
pub fn mc_masked_gradient(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
    r: usize,
    n_batches: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_shapes(net, data, kappa)?;
    if r >= net.m() {
        return Err(Error::DimensionMismatch {
            expected: net.m(),
            got: r,
            context: "neuron index out of range",
        });
    }
    let (n, d) = (data.n(), data.d());
    let coef = net.a[r] / (net.m() as f64).sqrt();
    mc_expectation(DrawSpec::masks(n * d, kappa), d, n_batches, seed, |masks, out| {
        let mut xc = vec![0.0; n * d];
        let mut res = vec![0.0; n];
        batch_residuals(net, data, masks, &mut xc, &mut res);
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let x = &xc[i * d..(i + 1) * d];
            if dot(net.row(r), x) >= 0.0 {
                for (o, xk) in out.iter_mut().zip(x) {
                    *o += coef * res[i] * xk;
                }
            }
        }
    })
}

/// Estimate of E_c[relu(w.(x * c))].
pub fn mc_activation_expectation(
    w: &[f64],
    x: &[f64],
    kappa: f64,
    n_samples: u64,
    seed: u64,
) -> Result<McEstimate> {
    check_nonnegative("kappa", kappa)?;
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: x.len(),
            context: "w and x",
        });
    }
    let u: Vec<f64> = w.iter().zip(x).map(|(a, b)| a * b).collect();
    mc_expectation(DrawSpec::masks(u.len(), kappa), 1, n_samples, seed, |c, out| {
        out[0] = relu(dot(&u, c));
    })
}
