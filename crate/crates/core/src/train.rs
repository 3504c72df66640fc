//! Masked gradient descent, plateau and rate measurement, and a FedAvg
//! simulator whose workers see freshly masked mini-batches.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_nonnegative, check_positive, Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::model::{
    clean_loss, masked_gradient_unchecked, sample_masks, Dataset, NetworkState,
};
use crate::seeding::{derive_seed, rng_for};

/// Clean loss above this aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub iters: usize,
    pub kappa: f64,
    pub base_seed: u64,
    pub record_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("eta", self.eta)?;
        check_nonnegative("kappa", self.kappa)?;
        if self.iters == 0 || self.record_every == 0 {
            return Err(Error::Degenerate("iters and record_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub iterations: Vec<usize>,
    pub clean_loss: Vec<f64>,
    pub masked_loss: Vec<f64>,
    pub weight_drift: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Seed of the mask batch used at iteration `k` of a run keyed by `base`.
/// Shares its derivation with FedAvg (round k, worker 0, local step 0).
pub fn step_seed(base: u64, k: u64) -> u64 {
    derive_seed(base, &[k, 0, 0])
}

/// One update W - eta grad L_C(W) with masks drawn from `step_seed`.
pub fn gd_step(
    net: &NetworkState,
    data: &Dataset,
    kappa: f64,
    eta: f64,
    step_seed: u64,
) -> Result<NetworkState> {
    check_positive("eta", eta)?;
    net.check_data(data)?;
    let masks = sample_masks(data.n(), data.d(), kappa, step_seed)?;
    let (grad, _) = masked_gradient_unchecked(net, data, &masks.masks);
    apply_update(net, &grad, eta)
}

fn apply_update(net: &NetworkState, grad: &Matrix, eta: f64) -> Result<NetworkState> {
    if let Some(k) = grad.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { index: k as u64 });
    }
    let mut next = net.clone();
    for (w, g) in next.w.data.iter_mut().zip(&grad.data) {
        *w -= eta * g;
    }
    Ok(next)
}

fn max_drift(net: &NetworkState, init: &NetworkState) -> f64 {
    (0..net.m())
        .map(|r| {
            let diff: Vec<f64> = net.row(r).iter().zip(init.row(r)).map(|(a, b)| a - b).collect();
            norm2(&diff)
        })
        .fold(0.0, f64::max)
}

/// Runs `cfg.iters` masked GD steps. Records every `record_every`-th iterate
/// and the final one; the masked loss at iterate k uses that step's masks.
pub fn train(net: &NetworkState, data: &Dataset, cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    net.check_data(data)?;
    let mut traj = Trajectory::default();
    let mut cur = net.clone();
    for k in 0..=cfg.iters {
        let masks = sample_masks(data.n(), data.d(), cfg.kappa, step_seed(cfg.base_seed, k as u64))?;
        let (grad, masked) = masked_gradient_unchecked(&cur, data, &masks.masks);
        let record = k % cfg.record_every == 0 || k == cfg.iters;
        if record {
            let clean = clean_loss(&cur, data)?;
            if !(clean <= DIVERGENCE_LOSS) {
                return Err(Error::Diverged { iter: k, loss: clean });
            }
            traj.iterations.push(k);
            traj.clean_loss.push(clean);
            traj.masked_loss.push(masked);
            traj.weight_drift.push(max_drift(&cur, net));
        }
        if !(masked <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { iter: k, loss: masked });
        }
        if k < cfg.iters {
            cur = apply_update(&cur, &grad, cfg.eta)?;
        }
    }
    Ok(traj)
}

/// Mean clean loss over the last `tail_fraction` of recorded points.
pub fn plateau_loss(traj: &Trajectory, tail_fraction: f64) -> Result<f64> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "tail_fraction",
            value: tail_fraction,
            reason: "must lie in (0, 1]",
        });
    }
    if traj.is_empty() {
        return Err(Error::Degenerate("empty trajectory".into()));
    }
    let len = traj.clean_loss.len();
    let take = ((len as f64 * tail_fraction).ceil() as usize).clamp(1, len);
    let tail = &traj.clean_loss[len - take..];
    Ok(tail.iter().sum::<f64>() / take as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub m: usize,
    pub n: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Per-iteration loss factor fitted on the pre-plateau segment.
    pub fitted_rate: f64,
    /// 1 - eta lambda0 / 2.
    pub predicted_rate: f64,
    pub fit_points: usize,
    pub plateau: f64,
    /// mn / lambda0^2 eps2^2 + eps1, unit constants.
    pub floor_expression: f64,
    pub max_weight_drift: f64,
    /// tau lambda0 / n.
    pub drift_scale: f64,
}

/// Least-squares slope of ln(loss) against iteration over the points whose
/// loss exceeds three times the 10% tail plateau.
pub fn convergence_report(
    traj: &Trajectory,
    lambda0: f64,
    eta: f64,
    bounds: (f64, f64, f64),
    meta: NetMeta,
) -> Result<ConvergenceReport> {
    check_positive("lambda0", lambda0)?;
    check_positive("eta", eta)?;
    let plateau = plateau_loss(traj, 0.1)?;
    let pts: Vec<(f64, f64)> = traj
        .iterations
        .iter()
        .zip(&traj.clean_loss)
        .filter(|(_, &l)| l > 3.0 * plateau && l > 0.0)
        .map(|(&k, &l)| (k as f64, l.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Degenerate(format!(
            "only {} pre-plateau points, need at least 5",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let (eps1, eps2, _) = bounds;
    let mn = (meta.m * meta.n) as f64;
    Ok(ConvergenceReport {
        fitted_rate: (sxy / sxx).exp(),
        predicted_rate: 1.0 - eta * lambda0 / 2.0,
        fit_points: pts.len(),
        plateau,
        floor_expression: mn / (lambda0 * lambda0) * eps2 * eps2 + eps1,
        max_weight_drift: traj.weight_drift.iter().copied().fold(0.0, f64::max),
        drift_scale: meta.tau * lambda0 / meta.n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub workers: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub kappa: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub base_seed: u64,
    /// Whether a worker's masks are redrawn every local step or once per round.
    #[serde(default)]
    pub mask_refresh: MaskRefresh,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRefresh {
    /// One mask per sample per round (a fading realization); local steps reuse it.
    #[default]
    PerRound,
    PerStep,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        check_positive("eta", self.eta)?;
        check_nonnegative("kappa", self.kappa)?;
        if self.workers == 0 || self.local_steps == 0 || self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::Degenerate("FedAvg counts must all be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedRound {
    pub round: usize,
    pub clean_loss: f64,
}

/// Contiguous, nearly equal shards of a seeded permutation; each shard's
/// indices are sorted so a single worker sees the data in its original order.
pub fn shard_indices(n: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 || workers > n {
        return Err(Error::Degenerate(format!("cannot split {n} samples over {workers} workers")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, &[u64::MAX]));
    let (base, extra) = (n / workers, n % workers);
    let mut shards = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        let mut s = perm[start..start + len].to_vec();
        s.sort_unstable();
        shards.push(s);
        start += len;
    }
    Ok(shards)
}

/// FedAvg: each round broadcasts W, every worker takes `local_steps` masked
/// mini-batch steps on its shard, and the server averages the results.
/// Entry 0 holds the initial loss.
pub fn fedavg_simulate(net0: &NetworkState, data: &Dataset, cfg: &FedConfig) -> Result<Vec<FedRound>> {
    cfg.validate()?;
    net0.check_data(data)?;
    let shards = shard_indices(data.n(), cfg.workers, cfg.base_seed)?;
    let local: Vec<Dataset> = shards.iter().map(|s| data.subset(s)).collect();
    let mut out = vec![FedRound {
        round: 0,
        clean_loss: clean_loss(net0, data)?,
    }];
    let mut global = net0.clone();
    for round in 0..cfg.rounds {
        let updated = (0..cfg.workers)
            .into_par_iter()
            .map(|w| run_worker(&global, &local[w], cfg, round, w))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = Matrix::zeros(global.m(), global.d());
        for net in &updated {
            for (s, v) in sum.data.iter_mut().zip(&net.w.data) {
                *s += v;
            }
        }
        let inv = 1.0 / cfg.workers as f64;
        for (g, s) in global.w.data.iter_mut().zip(&sum.data) {
            *g = s * inv;
        }
        let loss = clean_loss(&global, data)?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { iter: round + 1, loss });
        }
        out.push(FedRound {
            round: round + 1,
            clean_loss: loss,
        });
    }
    Ok(out)
}

fn run_worker(
    global: &NetworkState,
    shard: &Dataset,
    cfg: &FedConfig,
    round: usize,
    worker: usize,
) -> Result<NetworkState> {
    let mut net = global.clone();
    let (n, d) = (shard.n(), shard.d());
    let round_masks = match cfg.mask_refresh {
        MaskRefresh::PerRound => Some(sample_masks(
            n,
            d,
            cfg.kappa,
            derive_seed(cfg.base_seed, &[round as u64, worker as u64, 0]),
        )?),
        MaskRefresh::PerStep => None,
    };
    for step in 0..cfg.local_steps {
        let path = [round as u64, worker as u64, step as u64];
        let idx: Vec<usize> = if cfg.batch_size >= n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            let mut rng = rng_for(cfg.base_seed, &[path[0], path[1], path[2], 1]);
            let (picked, _) = all.partial_shuffle(&mut rng, cfg.batch_size);
            let mut picked = picked.to_vec();
            picked.sort_unstable();
            picked
        };
        let batch = if idx.len() == n { shard.clone() } else { shard.subset(&idx) };
        let masks = match &round_masks {
            Some(all) => {
                let mut rows = Matrix::zeros(idx.len(), d);
                for (k, &i) in idx.iter().enumerate() {
                    rows.row_mut(k).copy_from_slice(all.masks.row(i));
                }
                rows
            }
            None => sample_masks(idx.len(), d, cfg.kappa, derive_seed(cfg.base_seed, &path))?.masks,
        };
        let (grad, _) = masked_gradient_unchecked(&net, &batch, &masks);
        net = apply_update(&net, &grad, cfg.eta)?;
    }
    Ok(net)
}
