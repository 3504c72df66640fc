#![allow(dead_code)]

use masked_ntk::linalg::Matrix;
use masked_ntk::model::{init_network, masked_loss, synthetic_regression, Dataset, MaskBatch, NetworkState};
use masked_ntk::seeding::rng_for;
use rand::Rng;

/// Small random instance: data on the unit sphere, N(0, tau^2) weights.
pub fn instance(n: usize, d: usize, m: usize, tau: f64, seed: u64) -> (Dataset, NetworkState) {
    let data = synthetic_regression(n, d, 0.05, seed).unwrap();
    let net = init_network(m, d, tau, seed ^ 0x5151, seed ^ 0xa7a7).unwrap();
    (data, net)
}

/// Same instance with every input scaled into the unit ball by a random
/// radius, so norms below 1 are exercised too.
pub fn shrunk_instance(n: usize, d: usize, m: usize, seed: u64) -> (Dataset, NetworkState) {
    let (data, net) = instance(n, d, m, 1.0, seed);
    let mut rng = rng_for(seed, &[99]);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = 0.3 + 0.7 * rng.random::<f64>();
            data.x(i).iter().map(|v| v * s).collect()
        })
        .collect();
    (Dataset::new(Matrix::from_rows(&rows).unwrap(), data.targets.clone()).unwrap(), net)
}

pub fn with_w(net: &NetworkState, w: Matrix) -> NetworkState {
    NetworkState::new(w, net.a.clone(), net.tau).unwrap()
}

/// Central differences of the masked loss in every weight.
pub fn fd_gradient(net: &NetworkState, data: &Dataset, masks: &MaskBatch, h: f64) -> Matrix {
    let mut g = Matrix::zeros(net.m(), net.d());
    for k in 0..net.w.data.len() {
        let mut plus = net.w.clone();
        plus.data[k] += h;
        let mut minus = net.w.clone();
        minus.data[k] -= h;
        let lp = masked_loss(&with_w(net, plus), data, masks).unwrap();
        let lm = masked_loss(&with_w(net, minus), data, masks).unwrap();
        g.data[k] = (lp - lm) / (2.0 * h);
    }
    g
}

/// Smallest |w_r . (x_i * c_i)| over all (i, r).
pub fn min_abs_preactivation(net: &NetworkState, data: &Dataset, masks: &MaskBatch) -> f64 {
    let mut out = f64::INFINITY;
    for i in 0..data.n() {
        let c = masks.masks.row(i);
        for r in 0..net.m() {
            let z: f64 = net.row(r).iter().zip(data.x(i)).zip(c).map(|((w, x), c)| w * x * c).sum();
            out = out.min(z.abs());
        }
    }
    out
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}
