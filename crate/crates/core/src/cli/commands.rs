//! Command bodies. Each returns its output files and pass/fail checks; the
//! caller decides where and whether to write them.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::*;
use crate::analytic::{
    epsilon_bounds, exact_masked_activation_expectation, expected_loss_decomposition, gradient_decomposition,
    smoothed_activation,
};
use crate::gaussmath::{truncated_second_moment, UnivariateGaussian};
use crate::io::fmt_f64;
use crate::linalg::norm2;
use crate::mc::mc_activation_expectation;
use crate::model::{init_network, relu};
use crate::ntk::{empirical_ntk, h_infinity, kernel_frobenius_distance, min_eigenvalue, KernelMatrix};
use crate::seeding::derive_seed;
use crate::suite::{moment_check_suite, CheckRecord, MC_SIGMAS, MOMENT_NAMES};
use crate::train::{convergence_report, fedavg_simulate, plateau_loss, train, FedConfig, NetMeta, TrainConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            pass,
            detail,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Artifact {
    Csv {
        name: String,
        header: Vec<&'static str>,
        rows: Vec<Vec<String>>,
    },
    Json {
        name: String,
        value: Value,
    },
    Kernel {
        name: String,
        kernel: KernelMatrix,
    },
}

#[derive(Debug, Clone)]
pub struct Report {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
    pub seeds: Value,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Kappa as a map key and file-name fragment.
fn kappa_key(k: f64) -> String {
    format!("{k}")
}

/// Ascending by kappa, keeping the payload.
fn sorted_by_kappa<T: Copy>(items: &[(f64, T)]) -> Vec<(f64, T)> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

pub fn moments_check(cfg: &MomentsCheckConfig) -> Result<Report> {
    let records = moment_check_suite(cfg.n_sets, cfg.mc_samples, cfg.seed, cfg.perturb.as_ref())?;
    let mut summary: BTreeMap<String, BTreeMap<String, Value>> = BTreeMap::new();
    let mut checks = Vec::new();
    for name in MOMENT_NAMES {
        let mine: Vec<&CheckRecord> = records.iter().filter(|r| r.moment == name).collect();
        let failures = mine.iter().filter(|r| !r.pass).count();
        for oracle in ["mc", "quadrature"] {
            let sub: Vec<&&CheckRecord> = mine.iter().filter(|r| r.oracle == oracle).collect();
            if sub.is_empty() {
                continue;
            }
            let worst = sub
                .iter()
                .map(|r| (r.closed_form - r.oracle_value).abs() / r.tolerance)
                .fold(0.0, f64::max);
            summary.entry(name.to_string()).or_default().insert(
                oracle.to_string(),
                json!({
                    "comparisons": sub.len(),
                    "failures": sub.iter().filter(|r| !r.pass).count(),
                    "worst_error_over_tolerance": worst,
                }),
            );
        }
        checks.push(Check::new(
            name,
            failures == 0,
            format!("{failures} of {} comparisons outside tolerance", mine.len()),
        ));
    }
    let failed: Vec<&CheckRecord> = records.iter().filter(|r| !r.pass).collect();
    let report = json!({
        "all_pass": failed.is_empty(),
        "mc_sigmas": MC_SIGMAS,
        "summary": summary,
        "failures": failed,
        "comparisons": records,
    });
    Ok(Report {
        artifacts: vec![Artifact::Json {
            name: "report.json".into(),
            value: report,
        }],
        checks,
        seeds: json!({ "base": cfg.seed }),
    })
}

/// w and x in dimension d with w.x = z and ||w * x|| = s: x = 1/sqrt(d) and
/// w * x = (z/d) 1 + t (e_1 - e_2)/sqrt(2), t = sqrt(s^2 - z^2/d).
pub fn activation_pair(d: usize, s: f64, z: f64) -> (Vec<f64>, Vec<f64>) {
    let sd = (d as f64).sqrt();
    let t = (s * s - z * z / d as f64).max(0.0).sqrt();
    let mut u = vec![z / d as f64; d];
    u[0] += t / 2f64.sqrt();
    u[1] -= t / 2f64.sqrt();
    let x = vec![1.0 / sd; d];
    let w = u.iter().map(|v| v * sd).collect();
    (w, x)
}

pub fn activation_sweep(cfg: &ActivationSweepConfig) -> Result<Report> {
    let zs = cfg.z_grid();
    let mut rows = Vec::new();
    let mut outside = 0;
    let mut relu_gap: Option<f64> = None;
    let mut curves: Vec<(f64, usize)> = Vec::new();
    let mut hats: Vec<Vec<f64>> = Vec::new();
    for (ki, &kappa) in cfg.kappas.iter().enumerate() {
        let mut hat_row = Vec::with_capacity(zs.len());
        for (zi, &z) in zs.iter().enumerate() {
            let (w, x) = activation_pair(cfg.d, cfg.s, z);
            let hat = smoothed_activation(&w, &x, kappa)?;
            let exact = exact_masked_activation_expectation(&w, &x, kappa)?;
            let est = mc_activation_expectation(&w, &x, kappa, cfg.mc_samples, derive_seed(cfg.seed, &[ki as u64, zi as u64]))?;
            // A run that misses a rare activation reports SE 0; the standard
            // error implied by the exact variance still bounds its error.
            let var = if kappa > 0.0 {
                let pre = UnivariateGaussian::new(z, kappa * cfg.s)?;
                (truncated_second_moment(pre, 0.0)? - exact * exact).max(0.0)
            } else {
                0.0
            };
            let se = est.se().max((var / cfg.mc_samples as f64).sqrt());
            if (est.value() - exact).abs() > MC_SIGMAS * se + 8.0 * f64::EPSILON * exact.abs() {
                outside += 1;
            }
            if kappa <= 0.01 {
                let gap = (hat - relu(z)).abs();
                relu_gap = Some(relu_gap.map_or(gap, |g| g.max(gap)));
            }
            hat_row.push(hat);
            rows.push(vec![fmt_f64(z), fmt_f64(kappa), fmt_f64(hat), fmt_f64(exact), fmt_f64(est.value()), fmt_f64(est.se())]);
        }
        curves.push((kappa, ki));
        hats.push(hat_row);
    }
    let mut checks = vec![Check::new(
        "mc_matches_exact",
        outside == 0,
        format!("{outside} of {} grid points outside {MC_SIGMAS} SE", rows.len()),
    )];
    // Larger kappa gives a smaller smoothed activation at every z > 0.
    let order = sorted_by_kappa(&curves);
    let mut inversions = 0;
    for pair in order.windows(2) {
        let (lo, hi) = (&hats[pair[0].1], &hats[pair[1].1]);
        for (zi, &z) in zs.iter().enumerate() {
            if z > 0.0 && hi[zi] > lo[zi] {
                inversions += 1;
            }
        }
    }
    checks.push(Check::new(
        "smoothing_order",
        inversions == 0,
        format!("{inversions} (kappa pair, z > 0) points where sigma_hat increases with kappa"),
    ));
    if let Some(gap) = relu_gap {
        checks.push(Check::new(
            "small_kappa_tracks_relu",
            gap <= cfg.relu_gap_tol,
            format!("max |sigma_hat - relu| = {gap:.3e} for kappa <= 0.01 (tolerance {})", cfg.relu_gap_tol),
        ));
    }
    Ok(Report {
        artifacts: vec![Artifact::Csv {
            name: "activation_sweep.csv".into(),
            header: vec!["z", "kappa", "sigma_hat", "sigma_exact", "mc_mean", "mc_se"],
            rows,
        }],
        checks,
        seeds: json!({ "base": cfg.seed, "per_point": "derive_seed(base, [kappa_index, z_index])" }),
    })
}

pub fn loss_decomposition(cfg: &DecompositionConfig) -> Result<Report> {
    let seeds = cfg.seeds.resolve(cfg.seed);
    let (data, net) = build_instance(&cfg.data, &cfg.network, &seeds, true).map_err(crate::Error::Hypothesis)?;
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for &kappa in &cfg.kappas {
        let b = expected_loss_decomposition(&net, &data, kappa)?;
        if !b.within_bound() {
            violations.push(kappa);
        }
        rows.push(json!({
            "kappa": kappa,
            "exact": b.exact,
            "t1_smoothed": b.t1_smoothed,
            "t2_regularizer": b.t2_regularizer,
            "residual": b.residual,
            "residual_bound": b.residual_bound,
            "within_bound": b.within_bound(),
        }));
    }
    Ok(Report {
        artifacts: vec![Artifact::Json {
            name: "loss_decomposition.json".into(),
            value: json!({ "rows": rows }),
        }],
        checks: vec![Check::new(
            "residual_within_bound",
            violations.is_empty(),
            format!("violations at kappa {violations:?}"),
        )],
        seeds: to_value(&seeds),
    })
}

pub fn gradient_decomposition_sweep(cfg: &DecompositionConfig) -> Result<Report> {
    let seeds = cfg.seeds.resolve(cfg.seed);
    let (data, net) = build_instance(&cfg.data, &cfg.network, &seeds, false).map_err(crate::Error::Hypothesis)?;
    let mut rows = Vec::new();
    let mut violations = 0;
    let mut t3_ratios = Vec::new();
    let mut zero_rows_ok = true;
    for &kappa in &cfg.kappas {
        let (mut clean2, mut t32, mut exact2) = (0.0, 0.0, 0.0);
        let (mut res_max, mut bound) = (0.0f64, 0.0f64);
        for r in 0..net.m() {
            let g = gradient_decomposition(&net, &data, kappa, r)?;
            clean2 += norm2(&g.clean_grad_row).powi(2);
            t32 += norm2(&g.t3_row).powi(2);
            exact2 += norm2(&g.exact_expected_row).powi(2);
            res_max = res_max.max(g.residual_norm());
            bound = bound.max(g.residual_bound);
            if !g.within_bound() {
                violations += 1;
            }
        }
        let t3 = t32.sqrt();
        if (1e-3..=1e-1).contains(&kappa) {
            t3_ratios.push(t3 / (kappa * kappa));
        }
        if kappa == 0.0 && (t3 != 0.0 || res_max != 0.0) {
            zero_rows_ok = false;
        }
        rows.push(
            [kappa, clean2.sqrt(), t3, exact2.sqrt(), res_max, bound]
                .iter()
                .map(|&v| fmt_f64(v))
                .collect(),
        );
    }
    let mut checks = vec![Check::new(
        "residual_within_bound",
        violations == 0,
        format!("{violations} of {} (kappa, neuron) rows exceed the bound", cfg.kappas.len() * net.m()),
    )];
    if t3_ratios.len() >= 2 {
        let (lo, hi) = t3_ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let spread = hi / lo - 1.0;
        checks.push(Check::new(
            "t3_quadratic_in_kappa",
            spread <= 0.01,
            format!("t3_norm / kappa^2 spread {spread:.3e} over kappa in [1e-3, 1e-1]"),
        ));
    }
    if cfg.kappas.contains(&0.0) {
        checks.push(Check::new(
            "kappa_zero_is_clean",
            zero_rows_ok,
            "t3_norm and residual_norm vanish at kappa = 0".into(),
        ));
    }
    Ok(Report {
        artifacts: vec![Artifact::Csv {
            name: "gradient_decomposition.csv".into(),
            header: vec!["kappa", "clean_norm", "t3_norm", "exact_norm", "residual_norm", "residual_bound"],
            rows,
        }],
        checks,
        seeds: to_value(&seeds),
    })
}

pub fn train_sweep(cfg: &TrainSweepConfig) -> Result<Report> {
    let seeds = cfg.seeds.resolve(cfg.seed);
    let (data, net0) =
        build_instance(&cfg.data, &cfg.network, &seeds, cfg.convergence_report).map_err(crate::Error::Hypothesis)?;
    let lambda0 = if cfg.convergence_report {
        Some(min_eigenvalue(&h_infinity(&data)?)?)
    } else {
        None
    };
    let mut artifacts = Vec::new();
    let mut plateaus = Vec::new();
    let mut table = BTreeMap::new();
    let mut convergence = Vec::new();
    let mut drop0 = None;
    for &kappa in &cfg.kappas {
        let tc = TrainConfig {
            eta: cfg.eta,
            iters: cfg.iters,
            kappa,
            base_seed: seeds.masks,
            record_every: cfg.record_every,
        };
        let traj = train(&net0, &data, &tc)?;
        let plateau = plateau_loss(&traj, cfg.tail_fraction)?;
        plateaus.push((kappa, plateau));
        table.insert(kappa_key(kappa), plateau);
        if kappa == 0.0 {
            let first = traj.clean_loss[0];
            let last = *traj.clean_loss.last().expect("non-empty trajectory");
            drop0 = Some((first, last));
        }
        if let Some(l0) = lambda0 {
            let meta = NetMeta {
                m: net0.m(),
                n: data.n(),
                tau: net0.tau,
            };
            let rep = epsilon_bounds(&net0, &data, kappa).and_then(|eps| convergence_report(&traj, l0, cfg.eta, eps, meta));
            convergence.push(match rep {
                Ok(r) => json!({ "kappa": kappa, "report": r }),
                Err(e) => json!({ "kappa": kappa, "error": e.to_string() }),
            });
        }
        let rows = (0..traj.len())
            .map(|j| {
                vec![
                    traj.iterations[j].to_string(),
                    fmt_f64(traj.clean_loss[j]),
                    fmt_f64(traj.masked_loss[j]),
                    fmt_f64(traj.weight_drift[j]),
                ]
            })
            .collect();
        artifacts.push(Artifact::Csv {
            name: format!("trajectory_kappa_{}.csv", kappa_key(kappa)),
            header: vec!["iter", "clean_loss", "masked_loss", "max_weight_drift"],
            rows,
        });
    }
    let order = sorted_by_kappa(&plateaus);
    let inversions: Vec<(f64, f64)> = order
        .windows(2)
        .filter(|p| p[1].1 < p[0].1)
        .map(|p| (p[0].0, p[1].0))
        .collect();
    let monotone = inversions.is_empty();
    let mut checks = vec![Check::new(
        "plateau_monotone_in_kappa",
        monotone,
        if monotone {
            "plateau nondecreasing over the kappa grid".into()
        } else {
            format!("plateau decreases between kappa pairs {inversions:?}")
        },
    )];
    if let Some((first, last)) = drop0 {
        let ratio = first / last;
        checks.push(Check::new(
            "clean_run_converges",
            ratio >= cfg.min_clean_drop,
            format!("kappa = 0 clean loss {first:.4e} -> {last:.4e}, ratio {ratio:.1} (need {})", cfg.min_clean_drop),
        ));
    }
    artifacts.push(Artifact::Json {
        name: "summary.json".into(),
        value: json!({
            "plateau": table,
            "tail_fraction": cfg.tail_fraction,
            "monotone": monotone,
            "kappa0_initial_final": drop0,
            "lambda0": lambda0,
            "convergence": convergence,
        }),
    });
    Ok(Report {
        artifacts,
        checks,
        seeds: to_value(&seeds),
    })
}

pub fn fedavg_sweep(cfg: &FedavgSweepConfig) -> Result<Report> {
    let seeds = cfg.seeds.resolve(cfg.seed);
    let data = cfg.data.build(seeds.data)?;
    let n_k = cfg.kappas.len();
    let n_l = cfg.local_steps.len();
    // sums[k][l][round]
    let mut sums = vec![vec![vec![0.0; cfg.rounds + 1]; n_l]; n_k];
    let mut finals = vec![vec![Vec::with_capacity(cfg.replicates); n_l]; n_k];
    let mut replicate_seeds = Vec::new();
    for j in 0..cfg.replicates {
        let rs = seeds.replicate(j as u64);
        replicate_seeds.push(rs);
        let net0 = init_network(cfg.network.m, data.d(), cfg.network.tau, rs.sign, rs.weight)?;
        for (ki, &kappa) in cfg.kappas.iter().enumerate() {
            for (li, &steps) in cfg.local_steps.iter().enumerate() {
                let fc = FedConfig {
                    workers: cfg.workers,
                    local_steps: steps,
                    rounds: cfg.rounds,
                    kappa,
                    eta: cfg.eta,
                    batch_size: cfg.batch_size,
                    base_seed: rs.masks,
                    mask_refresh: cfg.mask_refresh,
                };
                let hist = fedavg_simulate(&net0, &data, &fc)?;
                for h in &hist {
                    sums[ki][li][h.round] += h.clean_loss;
                }
                finals[ki][li].push(hist.last().expect("round 0 is always recorded").clean_loss);
            }
        }
    }
    let reps = cfg.replicates as f64;
    let mut rows = Vec::new();
    for (ki, &kappa) in cfg.kappas.iter().enumerate() {
        for (li, &steps) in cfg.local_steps.iter().enumerate() {
            for (round, s) in sums[ki][li].iter().enumerate() {
                rows.push(vec![round.to_string(), fmt_f64(kappa), steps.to_string(), fmt_f64(s / reps)]);
            }
        }
    }
    let mean_final = |ki: usize, li: usize| finals[ki][li].iter().sum::<f64>() / reps;
    let mut kappa_order: Vec<usize> = (0..n_k).collect();
    kappa_order.sort_by(|&a, &b| cfg.kappas[a].total_cmp(&cfg.kappas[b]));
    let mut bad_steps = Vec::new();
    for (li, &steps) in cfg.local_steps.iter().enumerate() {
        if kappa_order.windows(2).any(|p| mean_final(p[1], li) < mean_final(p[0], li)) {
            bad_steps.push(steps);
        }
    }
    let mut checks = vec![Check::new(
        "final_loss_nondecreasing_in_kappa",
        bad_steps.is_empty(),
        format!("local-step counts with an inversion: {bad_steps:?}"),
    )];
    let (lmin, lmax) = (
        (0..n_l).min_by_key(|&l| cfg.local_steps[l]).expect("non-empty"),
        (0..n_l).max_by_key(|&l| cfg.local_steps[l]).expect("non-empty"),
    );
    if cfg.local_steps[lmin] != cfg.local_steps[lmax] {
        let kmax = *kappa_order.last().expect("non-empty");
        let (few, many) = (mean_final(kmax, lmin), mean_final(kmax, lmax));
        checks.push(Check::new(
            "local_steps_hurt_at_max_kappa",
            many > few,
            format!(
                "kappa = {}: {} local steps -> {many:.4e}, {} local steps -> {few:.4e}",
                cfg.kappas[kmax], cfg.local_steps[lmax], cfg.local_steps[lmin]
            ),
        ));
    }
    let table: Vec<Value> = cfg
        .kappas
        .iter()
        .enumerate()
        .flat_map(|(ki, &kappa)| {
            let finals = &finals;
            cfg.local_steps.iter().enumerate().map(move |(li, &steps)| {
                json!({
                    "kappa": kappa,
                    "local_steps": steps,
                    "mean_final_clean_loss": finals[ki][li].iter().sum::<f64>() / reps,
                    "replicate_final_clean_loss": finals[ki][li],
                })
            })
        })
        .collect();
    Ok(Report {
        artifacts: vec![
            Artifact::Csv {
                name: "fedavg.csv".into(),
                header: vec!["round", "kappa", "local_steps", "clean_loss"],
                rows,
            },
            Artifact::Json {
                name: "summary.json".into(),
                value: json!({ "finals": table, "replicates": cfg.replicates }),
            },
        ],
        checks,
        seeds: json!({ "resolved": seeds, "replicates": replicate_seeds }),
    })
}

pub fn ntk_report(cfg: &NtkReportConfig) -> Result<Report> {
    let mut lambdas = Vec::with_capacity(cfg.datasets);
    let mut first = None;
    let data_seeds: Vec<u64> = (0..cfg.datasets).map(|k| derive_seed(cfg.seed, &[1, k as u64])).collect();
    for &s in &data_seeds {
        let data = cfg.data.build(s)?;
        let h = h_infinity(&data)?;
        lambdas.push(min_eigenvalue(&h)?);
        if first.is_none() {
            first = Some((data, h));
        }
    }
    let (data, h) = first.expect("datasets >= 1");
    let mut artifacts = vec![Artifact::Kernel {
        name: "h_infinity.csv".into(),
        kernel: h.clone(),
    }];
    let mut widths = cfg.widths.clone();
    widths.sort_unstable();
    widths.dedup();
    let mut study = Vec::new();
    let mut dists = Vec::new();
    for &m in &widths {
        let (mut dist, mut eig) = (0.0, 0.0);
        for s in 0..cfg.net_seeds {
            let path = [m as u64, s as u64];
            let net = init_network(
                m,
                data.d(),
                cfg.tau,
                derive_seed(cfg.seed, &[2, path[0], path[1]]),
                derive_seed(cfg.seed, &[3, path[0], path[1]]),
            )?;
            let k = empirical_ntk(&net, &data)?;
            dist += kernel_frobenius_distance(&k, &h)?;
            eig += min_eigenvalue(&k)?;
            if s == 0 {
                artifacts.push(Artifact::Kernel {
                    name: format!("empirical_m{m}.csv"),
                    kernel: k,
                });
            }
        }
        let ns = cfg.net_seeds as f64;
        dists.push(dist / ns);
        study.push(json!({ "m": m, "mean_frobenius_distance": dist / ns, "mean_min_eigenvalue": eig / ns }));
    }
    let min_l = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    let mut checks = vec![Check::new(
        "h_infinity_positive_definite",
        min_l > cfg.min_lambda0,
        format!("smallest lambda0 over {} datasets = {min_l:.4e} (need > {:e})", cfg.datasets, cfg.min_lambda0),
    )];
    if dists.len() >= 2 {
        let decreasing = dists.windows(2).all(|p| p[1] < p[0]);
        checks.push(Check::new(
            "empirical_kernel_converges",
            decreasing,
            format!("mean ||H(m) - H_inf||_F over widths {widths:?}: {dists:?}"),
        ));
    }
    artifacts.push(Artifact::Json {
        name: "ntk_report.json".into(),
        value: json!({
            "lambda0": lambdas,
            "min_lambda0": min_l,
            "lambda0_first_dataset": lambdas[0],
            "width_study": study,
        }),
    });
    Ok(Report {
        artifacts,
        checks,
        seeds: json!({ "base": cfg.seed, "datasets": data_seeds }),
    })
}
