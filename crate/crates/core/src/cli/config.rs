//! JSON experiment configs. Every field except `schema_version` has a default;
//! unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::analytic::def_quantities;
use crate::model::{gaussian_targets, init_network, synthetic_regression, validate_dataset, Dataset, NetworkState};
use crate::seeding::derive_seed;
use crate::suite::{Perturbation, MOMENT_NAMES};
use crate::train::MaskRefresh;

pub const SCHEMA_VERSION: u32 = 1;

/// Exact expectations cost O(n m^2); configs with m sqrt(n) above this are
/// rejected.
pub const EXACT_COST_CAP: f64 = 1e4;

pub type Invalid = String;

/// Configs carrying a base seed that `--seed` replaces.
pub trait HasSeed {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! has_seed {
    ($($t:ty),*) => {$(
        impl HasSeed for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
        }
    )*};
}

has_seed!(
    MomentsCheckConfig,
    ActivationSweepConfig,
    DecompositionConfig,
    TrainSweepConfig,
    FedavgSweepConfig,
    NtkReportConfig
);

fn ensure(cond: bool, msg: impl FnOnce() -> String, errs: &mut Vec<Invalid>) {
    if !cond {
        errs.push(msg());
    }
}

fn check_schema(v: u32, errs: &mut Vec<Invalid>) {
    ensure(
        v == SCHEMA_VERSION,
        || {
            if v == 0 {
                "schema_version is missing".into()
            } else {
                format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")
            }
        },
        errs,
    );
}

fn check_kappas(name: &str, ks: &[f64], max: f64, errs: &mut Vec<Invalid>) {
    ensure(!ks.is_empty(), || format!("{name} must not be empty"), errs);
    for &k in ks {
        ensure(
            k.is_finite() && (0.0..=max).contains(&k),
            || format!("{name} entry {k} must lie in [0, {max}]"),
            errs,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Unit-sphere inputs, y = clamp(tanh(v.x) + noise xi).
    Regression,
    /// Unit-sphere inputs, y ~ N(0, sigma_y^2).
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub kind: DataKind,
    pub n: usize,
    pub d: usize,
    pub noise: f64,
    pub sigma_y: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            kind: DataKind::Regression,
            n: 500,
            d: 20,
            noise: 0.05,
            sigma_y: 0.5,
        }
    }
}

impl DataSpec {
    fn gaussian() -> Self {
        DataSpec {
            kind: DataKind::Gaussian,
            ..DataSpec::default()
        }
    }

    fn check(&self, errs: &mut Vec<Invalid>) {
        ensure(self.n >= 1 && self.d >= 2, || "data.n must be >= 1 and data.d >= 2".into(), errs);
        ensure(self.noise.is_finite() && self.noise >= 0.0, || "data.noise must be >= 0".into(), errs);
        ensure(self.sigma_y.is_finite() && self.sigma_y > 0.0, || "data.sigma_y must be > 0".into(), errs);
    }

    pub fn build(&self, seed: u64) -> crate::Result<Dataset> {
        let data = match self.kind {
            DataKind::Regression => synthetic_regression(self.n, self.d, self.noise, seed)?,
            DataKind::Gaussian => gaussian_targets(self.n, self.d, self.sigma_y, seed)?,
        };
        validate_dataset(&data, f64::INFINITY)?;
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub m: usize,
    pub tau: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec { m: 100, tau: 1.0 }
    }
}

impl NetSpec {
    fn check(&self, errs: &mut Vec<Invalid>) {
        ensure(self.m >= 1, || "network.m must be >= 1".into(), errs);
        ensure(self.tau.is_finite() && self.tau > 0.0, || "network.tau must be > 0".into(), errs);
    }
}

/// Explicit sub-seeds; any left out derive from the base seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedOverrides {
    pub data: Option<u64>,
    pub sign: Option<u64>,
    pub weight: Option<u64>,
    pub masks: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub sign: u64,
    pub weight: u64,
    pub masks: u64,
}

impl SeedOverrides {
    pub fn resolve(&self, base: u64) -> Seeds {
        Seeds {
            data: self.data.unwrap_or_else(|| derive_seed(base, &[1])),
            sign: self.sign.unwrap_or_else(|| derive_seed(base, &[2])),
            weight: self.weight.unwrap_or_else(|| derive_seed(base, &[3])),
            masks: self.masks.unwrap_or_else(|| derive_seed(base, &[4])),
        }
    }
}

impl Seeds {
    /// Network and mask seeds of replicate j; the data seed is shared.
    pub fn replicate(&self, j: u64) -> Seeds {
        Seeds {
            data: self.data,
            sign: derive_seed(self.sign, &[j]),
            weight: derive_seed(self.weight, &[j]),
            masks: derive_seed(self.masks, &[j]),
        }
    }
}

/// Builds the dataset and network of an instance and checks the target
/// hypothesis B_y <= 3 sqrt(m) R_w when `need_target_bound`.
pub fn build_instance(
    data: &DataSpec,
    net: &NetSpec,
    seeds: &Seeds,
    need_target_bound: bool,
) -> std::result::Result<(Dataset, NetworkState), Invalid> {
    let ds = data.build(seeds.data).map_err(|e| format!("data: {e}"))?;
    let nw = init_network(net.m, ds.d(), net.tau, seeds.sign, seeds.weight).map_err(|e| format!("network: {e}"))?;
    if need_target_bound {
        let q = def_quantities(&nw, &ds, 0.0).map_err(|e| e.to_string())?;
        let cap = 3.0 * (net.m as f64).sqrt() * q.r_w;
        if q.b_y > cap {
            return Err(format!("max |y| = {} exceeds 3 sqrt(m) max ||w_r|| = {cap}", q.b_y));
        }
    }
    Ok((ds, nw))
}

fn check_exact_cost(data: &DataSpec, net: &NetSpec, errs: &mut Vec<Invalid>) {
    let cost = net.m as f64 * (data.n as f64).sqrt();
    ensure(
        cost <= EXACT_COST_CAP,
        || format!("m sqrt(n) = {cost:.0} exceeds the exact-evaluation cap {EXACT_COST_CAP}"),
        errs,
    );
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsCheckConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub n_sets: usize,
    pub mc_samples: u64,
    pub perturb: Option<Perturbation>,
}

impl Default for MomentsCheckConfig {
    fn default() -> Self {
        MomentsCheckConfig {
            schema_version: 0,
            seed: 20241017,
            n_sets: 200,
            mc_samples: 1_000_000,
            perturb: None,
        }
    }
}

impl MomentsCheckConfig {
    pub fn validate(&self) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        ensure(self.n_sets >= 1, || "n_sets must be >= 1".into(), &mut errs);
        ensure(self.mc_samples >= 2, || format!("mc_samples = {} must be >= 2", self.mc_samples), &mut errs);
        if let Some(p) = &self.perturb {
            ensure(
                MOMENT_NAMES.contains(&p.moment.as_str()),
                || format!("perturb.moment `{}` is not one of {:?}", p.moment, MOMENT_NAMES),
                &mut errs,
            );
            ensure(p.delta.is_finite(), || "perturb.delta must be finite".into(), &mut errs);
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivationSweepConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub d: usize,
    /// ||w * x||, held fixed while z = w.x varies.
    pub s: f64,
    pub kappas: Vec<f64>,
    pub z_min: f64,
    pub z_max: f64,
    pub z_points: usize,
    pub mc_samples: u64,
    /// Largest allowed |sigma_hat - relu| on the grid for kappa <= 0.01.
    pub relu_gap_tol: f64,
}

impl Default for ActivationSweepConfig {
    fn default() -> Self {
        ActivationSweepConfig {
            schema_version: 0,
            seed: 20241017,
            d: 16,
            s: 1.0,
            kappas: vec![0.01, 0.1, 0.25, 0.5, 1.0, 2.0],
            z_min: -3.0,
            z_max: 3.0,
            z_points: 61,
            mc_samples: 100_000,
            relu_gap_tol: 0.01,
        }
    }
}

impl ActivationSweepConfig {
    pub fn validate(&self) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        check_kappas("kappas", &self.kappas, f64::MAX, &mut errs);
        ensure(self.d >= 2, || "d must be >= 2".into(), &mut errs);
        ensure(self.s.is_finite() && self.s > 0.0, || "s must be > 0".into(), &mut errs);
        ensure(
            self.z_min.is_finite() && self.z_max.is_finite() && self.z_min <= self.z_max,
            || "need finite z_min <= z_max".into(),
            &mut errs,
        );
        ensure(
            self.z_points >= 2 || (self.z_points == 1 && self.z_min == self.z_max),
            || "z_points must be >= 2 (or 1 with z_min = z_max)".into(),
            &mut errs,
        );
        let zcap = self.s * (self.d as f64).sqrt();
        ensure(
            self.z_min.abs().max(self.z_max.abs()) <= zcap,
            || format!("|z| must not exceed s sqrt(d) = {zcap}"),
            &mut errs,
        );
        ensure(self.mc_samples >= 2, || format!("mc_samples = {} must be >= 2", self.mc_samples), &mut errs);
        ensure(self.relu_gap_tol >= 0.0, || "relu_gap_tol must be >= 0".into(), &mut errs);
        errs
    }

    pub fn z_grid(&self) -> Vec<f64> {
        if self.z_points == 1 {
            return vec![self.z_min];
        }
        let step = (self.z_max - self.z_min) / (self.z_points - 1) as f64;
        (0..self.z_points).map(|i| self.z_min + step * i as f64).collect()
    }
}

/// Shared by the loss and gradient decompositions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub network: NetSpec,
    pub kappas: Vec<f64>,
    pub seeds: SeedOverrides,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            schema_version: 0,
            seed: 20241017,
            data: DataSpec::gaussian(),
            network: NetSpec { m: 100, tau: 0.1 },
            kappas: vec![0.0, 1e-3, 1e-2, 1e-1, 0.5, 1.0],
            seeds: SeedOverrides::default(),
        }
    }
}

impl DecompositionConfig {
    /// `kappa_max` is 1 for the gradient split, which assumes kappa <= 1.
    pub fn validate(&self, kappa_max: f64) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        self.data.check(&mut errs);
        self.network.check(&mut errs);
        check_kappas("kappas", &self.kappas, kappa_max, &mut errs);
        check_exact_cost(&self.data, &self.network, &mut errs);
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSweepConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub network: NetSpec,
    pub eta: f64,
    pub iters: usize,
    pub record_every: usize,
    pub kappas: Vec<f64>,
    pub tail_fraction: f64,
    /// Required ratio initial / final clean loss of the kappa = 0 run.
    pub min_clean_drop: f64,
    /// Fit rates and evaluate the floor expression per kappa.
    pub convergence_report: bool,
    pub seeds: SeedOverrides,
}

impl Default for TrainSweepConfig {
    fn default() -> Self {
        TrainSweepConfig {
            schema_version: 0,
            seed: 20241017,
            data: DataSpec::default(),
            network: NetSpec::default(),
            eta: 0.005,
            iters: 2000,
            record_every: 10,
            kappas: vec![0.0, 0.05, 0.2, 0.4, 0.6, 1.0, 2.0],
            tail_fraction: 0.1,
            min_clean_drop: 100.0,
            convergence_report: true,
            seeds: SeedOverrides::default(),
        }
    }
}

impl TrainSweepConfig {
    pub fn validate(&self) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        self.data.check(&mut errs);
        self.network.check(&mut errs);
        check_kappas("kappas", &self.kappas, f64::MAX, &mut errs);
        ensure(self.eta.is_finite() && self.eta > 0.0, || "eta must be > 0".into(), &mut errs);
        ensure(self.iters >= 1 && self.record_every >= 1, || "iters and record_every must be >= 1".into(), &mut errs);
        ensure(
            self.tail_fraction > 0.0 && self.tail_fraction <= 1.0,
            || "tail_fraction must lie in (0, 1]".into(),
            &mut errs,
        );
        ensure(self.min_clean_drop >= 1.0, || "min_clean_drop must be >= 1".into(), &mut errs);
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedavgSweepConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub network: NetSpec,
    pub workers: usize,
    pub rounds: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub kappas: Vec<f64>,
    pub local_steps: Vec<usize>,
    pub replicates: usize,
    pub mask_refresh: MaskRefresh,
    pub seeds: SeedOverrides,
}

impl Default for FedavgSweepConfig {
    fn default() -> Self {
        FedavgSweepConfig {
            schema_version: 0,
            seed: 20241017,
            data: DataSpec::default(),
            network: NetSpec::default(),
            workers: 5,
            rounds: 100,
            eta: 0.2,
            batch_size: 100,
            kappas: vec![0.0, 0.2, 0.5, 1.0],
            local_steps: vec![1, 20, 40],
            replicates: 5,
            mask_refresh: MaskRefresh::PerRound,
            seeds: SeedOverrides::default(),
        }
    }
}

impl FedavgSweepConfig {
    pub fn validate(&self) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        self.data.check(&mut errs);
        self.network.check(&mut errs);
        check_kappas("kappas", &self.kappas, f64::MAX, &mut errs);
        ensure(self.eta.is_finite() && self.eta > 0.0, || "eta must be > 0".into(), &mut errs);
        ensure(
            self.workers >= 1 && self.workers <= self.data.n,
            || format!("workers must lie in [1, n = {}]", self.data.n),
            &mut errs,
        );
        ensure(self.rounds >= 1 && self.batch_size >= 1, || "rounds and batch_size must be >= 1".into(), &mut errs);
        ensure(
            !self.local_steps.is_empty() && self.local_steps.iter().all(|&l| l >= 1),
            || "local_steps must be a non-empty list of counts >= 1".into(),
            &mut errs,
        );
        ensure(self.replicates >= 1, || "replicates must be >= 1".into(), &mut errs);
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkReportConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSpec,
    /// Independent datasets whose lambda0 is reported.
    pub datasets: usize,
    pub widths: Vec<usize>,
    /// Networks per width in the empirical-kernel study.
    pub net_seeds: usize,
    pub tau: f64,
    pub min_lambda0: f64,
}

impl Default for NtkReportConfig {
    fn default() -> Self {
        NtkReportConfig {
            schema_version: 0,
            seed: 20241017,
            data: DataSpec {
                n: 30,
                d: 10,
                ..DataSpec::default()
            },
            datasets: 50,
            widths: vec![100, 1000, 10000],
            net_seeds: 20,
            tau: 1.0,
            min_lambda0: 1e-8,
        }
    }
}

impl NtkReportConfig {
    pub fn validate(&self) -> Vec<Invalid> {
        let mut errs = Vec::new();
        check_schema(self.schema_version, &mut errs);
        self.data.check(&mut errs);
        ensure(self.datasets >= 1 && self.net_seeds >= 1, || "datasets and net_seeds must be >= 1".into(), &mut errs);
        ensure(
            !self.widths.is_empty() && self.widths.iter().all(|&m| m >= 1),
            || "widths must be a non-empty list of widths >= 1".into(),
            &mut errs,
        );
        ensure(self.tau.is_finite() && self.tau > 0.0, || "tau must be > 0".into(), &mut errs);
        ensure(self.min_lambda0 >= 0.0, || "min_lambda0 must be >= 0".into(), &mut errs);
        errs
    }
}
