//! Datasets, the NTK-scaled two-layer ReLU network, Gaussian input masks, and
//! per-realization losses and gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_nonnegative, check_positive, Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::seeding::{derive_seed, rng_from_seed};

/// Normalized inputs whose absolute cosine exceeds this are collinear.
pub const COLLINEAR_COS: f64 = 1.0 - 1e-12;
/// Slack on the unit-ball check for inputs read back from decimal text.
const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n x d, one sample per row.
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows,
                got: targets.len(),
                context: "one target per input",
            });
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn n(&self) -> usize {
        self.inputs.rows
    }

    pub fn d(&self) -> usize {
        self.inputs.cols
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Matrix::zeros(idx.len(), self.d());
        let mut targets = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            inputs.row_mut(k).copy_from_slice(self.x(i));
            targets.push(self.targets[i]);
        }
        Dataset { inputs, targets }
    }
}

/// Checks unit-ball inputs, bounded targets and pairwise non-collinearity.
/// Indices in the returned error are zero-based.
pub fn validate_dataset(data: &Dataset, target_bound: f64) -> Result<()> {
    if data.n() == 0 || data.d() == 0 {
        return Err(Error::Degenerate("dataset needs n >= 1 and d >= 1".into()));
    }
    let mut unit = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let x = data.x(i);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i as u64 });
        }
        let nx = norm2(x);
        if nx > 1.0 + NORM_SLACK {
            return Err(Error::InputNorm { index: i, norm: nx });
        }
        if nx == 0.0 {
            return Err(Error::ZeroVector("dataset input"));
        }
        let y = data.targets[i];
        if !(y.abs() <= target_bound) {
            return Err(Error::TargetBound {
                index: i,
                value: y,
                bound: target_bound,
            });
        }
        unit.push(x.iter().map(|v| v / nx).collect::<Vec<_>>());
    }
    for i in 0..unit.len() {
        for j in (i + 1)..unit.len() {
            if dot(&unit[i], &unit[j]).abs() > COLLINEAR_COS {
                return Err(Error::Collinear(i, j));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    /// m x d first-layer weights, row r is w_r.
    pub w: Matrix,
    /// Fixed second-layer signs.
    pub a: Vec<f64>,
    pub tau: f64,
}

impl NetworkState {
    pub fn new(w: Matrix, a: Vec<f64>, tau: f64) -> Result<Self> {
        if w.rows == 0 || w.cols == 0 {
            return Err(Error::Degenerate("network needs m >= 1 and d >= 1".into()));
        }
        if a.len() != w.rows {
            return Err(Error::DimensionMismatch {
                expected: w.rows,
                got: a.len(),
                context: "one output sign per neuron",
            });
        }
        if a.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Degenerate("output signs must be +1 or -1".into()));
        }
        if let Some(k) = w.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k as u64 });
        }
        Ok(NetworkState { w, a, tau })
    }

    pub fn m(&self) -> usize {
        self.w.rows
    }

    pub fn d(&self) -> usize {
        self.w.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.w.row(r)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.len(),
                context: "input dimension",
            });
        }
        Ok(())
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: data.d(),
                context: "dataset dimension",
            });
        }
        Ok(())
    }
}

/// JSON layout `{m, d, tau, a, W}` with `W` flattened row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkStateJson {
    pub m: usize,
    pub d: usize,
    pub tau: f64,
    pub a: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
}

impl From<&NetworkState> for NetworkStateJson {
    fn from(net: &NetworkState) -> Self {
        NetworkStateJson {
            m: net.m(),
            d: net.d(),
            tau: net.tau,
            a: net.a.clone(),
            w: net.w.data.clone(),
        }
    }
}

impl TryFrom<NetworkStateJson> for NetworkState {
    type Error = Error;
    fn try_from(j: NetworkStateJson) -> Result<Self> {
        if j.w.len() != j.m * j.d {
            return Err(Error::DimensionMismatch {
                expected: j.m * j.d,
                got: j.w.len(),
                context: "W must hold m*d entries",
            });
        }
        let w = Matrix {
            rows: j.m,
            cols: j.d,
            data: j.w,
        };
        NetworkState::new(w, j.a, j.tau)
    }
}

/// W entries i.i.d. N(0, tau^2), signs i.i.d. uniform.
pub fn init_network(
    m: usize,
    d: usize,
    tau: f64,
    sign_seed: u64,
    weight_seed: u64,
) -> Result<NetworkState> {
    check_positive("tau", tau)?;
    if m == 0 || d == 0 {
        return Err(Error::Degenerate("network needs m >= 1 and d >= 1".into()));
    }
    let mut rng = rng_from_seed(weight_seed);
    let mut w = Matrix::zeros(m, d);
    for v in w.data.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = tau * g;
    }
    let mut rng = rng_from_seed(sign_seed);
    let a = (0..m)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    NetworkState::new(w, a, tau)
}

pub fn relu(z: f64) -> f64 {
    z.max(0.0)
}

/// f(W, x) = (1/sqrt m) sum_r a_r relu(w_r . x).
pub fn forward(net: &NetworkState, x: &[f64]) -> Result<f64> {
    net.check_input(x)?;
    Ok(forward_unchecked(net, x))
}

pub(crate) fn forward_unchecked(net: &NetworkState, x: &[f64]) -> f64 {
    let s: f64 = (0..net.m())
        .map(|r| net.a[r] * relu(dot(net.row(r), x)))
        .sum();
    s / (net.m() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    /// n x d, row i multiplies input i.
    pub masks: Matrix,
    pub kappa: f64,
    pub seed: u64,
}

impl MaskBatch {
    pub fn ones(n: usize, d: usize) -> Self {
        MaskBatch {
            masks: Matrix {
                rows: n,
                cols: d,
                data: vec![1.0; n * d],
            },
            kappa: 0.0,
            seed: 0,
        }
    }
}

/// n masks with i.i.d. N(1, kappa^2) entries.
pub fn sample_masks(n: usize, d: usize, kappa: f64, seed: u64) -> Result<MaskBatch> {
    check_nonnegative("kappa", kappa)?;
    let mut batch = MaskBatch::ones(n, d);
    batch.kappa = kappa;
    batch.seed = seed;
    if kappa > 0.0 {
        let mut rng = rng_from_seed(seed);
        for v in batch.masks.data.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = 1.0 + kappa * g;
        }
    }
    Ok(batch)
}

/// Masks for iteration `k` of a run keyed by `base_seed`.
pub fn sample_masks_for_step(
    n: usize,
    d: usize,
    kappa: f64,
    base_seed: u64,
    k: u64,
) -> Result<MaskBatch> {
    sample_masks(n, d, kappa, derive_seed(base_seed, &[k]))
}

fn check_masks(net: &NetworkState, data: &Dataset, masks: &MaskBatch) -> Result<()> {
    net.check_data(data)?;
    if masks.masks.rows != data.n() || masks.masks.cols != data.d() {
        return Err(Error::DimensionMismatch {
            expected: data.n() * data.d(),
            got: masks.masks.rows * masks.masks.cols,
            context: "mask batch shape must be n x d",
        });
    }
    Ok(())
}

/// Residuals f(W, x_i * c_i) - y_i and the masked inputs.
fn masked_residuals(net: &NetworkState, data: &Dataset, masks: &Matrix) -> (Vec<f64>, Matrix) {
    let mut xc = Matrix::zeros(data.n(), data.d());
    let mut res = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let row = xc.row_mut(i);
        for ((o, x), c) in row.iter_mut().zip(data.x(i)).zip(masks.row(i)) {
            *o = x * c;
        }
        res.push(forward_unchecked(net, xc.row(i)) - data.targets[i]);
    }
    (res, xc)
}

/// L_C(W) = 1/2 sum_i (f(W, x_i * c_i) - y_i)^2.
pub fn masked_loss(net: &NetworkState, data: &Dataset, masks: &MaskBatch) -> Result<f64> {
    check_masks(net, data, masks)?;
    let (res, _) = masked_residuals(net, data, &masks.masks);
    Ok(0.5 * res.iter().map(|e| e * e).sum::<f64>())
}

/// Gradient of L_C with respect to W (m x d).
pub fn masked_gradient(net: &NetworkState, data: &Dataset, masks: &MaskBatch) -> Result<Matrix> {
    check_masks(net, data, masks)?;
    Ok(masked_gradient_unchecked(net, data, &masks.masks).0)
}

/// Gradient plus the masked loss from the same pass.
pub(crate) fn masked_gradient_unchecked(
    net: &NetworkState,
    data: &Dataset,
    masks: &Matrix,
) -> (Matrix, f64) {
    let (res, xc) = masked_residuals(net, data, masks);
    let scale = 1.0 / (net.m() as f64).sqrt();
    let mut grad = Matrix::zeros(net.m(), net.d());
    for r in 0..net.m() {
        let w = net.row(r);
        let coef = net.a[r] * scale;
        let g = grad.row_mut(r);
        for i in 0..data.n() {
            let x = xc.row(i);
            if dot(w, x) >= 0.0 {
                let s = coef * res[i];
                for (gk, xk) in g.iter_mut().zip(x) {
                    *gk += s * xk;
                }
            }
        }
    }
    let loss = 0.5 * res.iter().map(|e| e * e).sum::<f64>();
    (grad, loss)
}

pub fn clean_loss(net: &NetworkState, data: &Dataset) -> Result<f64> {
    masked_loss(net, data, &MaskBatch::ones(data.n(), data.d()))
}

pub fn clean_gradient(net: &NetworkState, data: &Dataset) -> Result<Matrix> {
    masked_gradient(net, data, &MaskBatch::ones(data.n(), data.d()))
}

/// 1 + kappa sqrt(2 log(2d/delta)): with probability at least 1 - delta every
/// coordinate of c ~ N(1, kappa^2 I_d) lies below this.
pub fn mask_linf_bound(kappa: f64, d: usize, delta: f64) -> Result<f64> {
    check_nonnegative("kappa", kappa)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "delta",
            value: delta,
            reason: "must lie in (0, 1)",
        });
    }
    if d == 0 {
        return Err(Error::Degenerate("d must be at least 1".into()));
    }
    Ok(1.0 + kappa * (2.0 * (2.0 * d as f64 / delta).ln()).sqrt())
}

/// Unit-sphere inputs with targets tanh(v . x) + noise * xi, clipped to [-1, 1].
pub fn synthetic_regression(n: usize, d: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_nonnegative("noise", noise)?;
    let inputs = unit_sphere_inputs(n, d, derive_seed(seed, &[0]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let targets = (0..n)
        .map(|i| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            ((dot(&v, inputs.row(i))).tanh() + noise * xi).clamp(-1.0, 1.0)
        })
        .collect();
    Dataset::new(inputs, targets)
}

/// Unit-sphere inputs with i.i.d. N(0, sigma_y^2) targets.
pub fn gaussian_targets(n: usize, d: usize, sigma_y: f64, seed: u64) -> Result<Dataset> {
    check_nonnegative("sigma_y", sigma_y)?;
    let inputs = unit_sphere_inputs(n, d, derive_seed(seed, &[0]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let targets = (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            sigma_y * g
        })
        .collect();
    Dataset::new(inputs, targets)
}

pub fn unit_sphere_inputs(n: usize, d: usize, seed: u64) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("need n >= 1 and d >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut x = Matrix::zeros(n, d);
    for i in 0..n {
        loop {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nr = norm2(&row);
            if nr > 1e-8 {
                for (o, v) in x.row_mut(i).iter_mut().zip(&row) {
                    *o = v / nr;
                }
                break;
            }
        }
    }
    Ok(x)
}
