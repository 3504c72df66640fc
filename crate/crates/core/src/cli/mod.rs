//! `masked-ntk <command> --config <path> [--out <dir>] [--seed <u64>]`.
//!
//! Exit status: 0 when every check passes, 1 on a failed check or runtime
//! error, 2 on an invalid config or environment. Nothing is written unless
//! the config validates, and outputs are written only after the run completes.

pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::io::{write_csv, write_json, write_kernel, IoError};
use commands::{Artifact, Report};
use config::*;

pub const THREADS_ENV: &str = "MASKED_NTK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "masked-ntk", version, about = "Closed-form and Monte Carlo checks for Gaussian-masked ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config; `{"schema_version": 1}` selects every default.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: masked-ntk-out/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the config's base seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Closed-form moments against Monte Carlo and quadrature.
    MomentsCheck(RunArgs),
    /// Smoothed, exact and sampled activation over (z, kappa) grids.
    ActivationSweep(RunArgs),
    /// Expected loss split into smoothed loss, regularizer and residual.
    LossDecomposition(RunArgs),
    /// Expected gradient split into clean gradient, T3 and residual.
    GradientDecomposition(RunArgs),
    /// Masked full-batch training over a kappa grid.
    TrainSweep(RunArgs),
    /// FedAvg over kappa and local-step grids.
    FedavgSweep(RunArgs),
    /// Infinite-width and empirical NTK spectra.
    NtkReport(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MomentsCheck(_) => "moments-check",
            Command::ActivationSweep(_) => "activation-sweep",
            Command::LossDecomposition(_) => "loss-decomposition",
            Command::GradientDecomposition(_) => "gradient-decomposition",
            Command::TrainSweep(_) => "train-sweep",
            Command::FedavgSweep(_) => "fedavg-sweep",
            Command::NtkReport(_) => "ntk-report",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::MomentsCheck(a)
            | Command::ActivationSweep(a)
            | Command::LossDecomposition(a)
            | Command::GradientDecomposition(a)
            | Command::TrainSweep(a)
            | Command::FedavgSweep(a)
            | Command::NtkReport(a) => a,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Config(Vec<String>),
    /// Exit 1.
    Run(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

/// Caps rayon's global pool from `MASKED_NTK_THREADS` when set.
pub fn configure_threads() -> Result<Option<usize>, Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Config(vec![format!("{THREADS_ENV}={raw:?} must be a positive integer")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(vec![format!("{THREADS_ENV}: {e}")]))?;
    Ok(Some(n))
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(vec![format!("{}: {e}", path.display())]))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(vec![format!("{}: {e}", path.display())]))
}

/// Loads a config and applies the `--seed` override.
fn load_seeded<T: DeserializeOwned + HasSeed>(args: &RunArgs) -> Result<T, Failure> {
    let mut c: T = load(&args.config)?;
    if let Some(s) = args.seed {
        *c.seed_mut() = s;
    }
    Ok(c)
}

fn require(errs: Vec<String>) -> Result<(), Failure> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Failure::Config(errs))
    }
}

fn instance_ok(data: &DataSpec, net: &NetSpec, seeds: &SeedOverrides, base: u64, target_bound: bool) -> Result<(), Failure> {
    build_instance(data, net, &seeds.resolve(base), target_bound)
        .map(|_| ())
        .map_err(|e| Failure::Config(vec![e]))
}

/// The output directory must be creatable: an existing path has to be a
/// directory, otherwise its nearest existing ancestor must be one.
fn check_out_dir(out: &Path) -> Result<(), Failure> {
    let mut p = Some(out);
    while let Some(cur) = p {
        if cur.as_os_str().is_empty() {
            return Ok(());
        }
        if let Ok(meta) = fs::metadata(cur) {
            if !meta.is_dir() {
                return Err(Failure::Config(vec![format!("{} exists and is not a directory", cur.display())]));
            }
            if meta.permissions().readonly() {
                return Err(Failure::Config(vec![format!("{} is not writable", cur.display())]));
            }
            return Ok(());
        }
        p = cur.parent();
    }
    Ok(())
}

/// Outcome of a completed run.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub report: Report,
}

impl RunSummary {
    pub fn all_pass(&self) -> bool {
        self.report.checks.iter().all(|c| c.pass)
    }
}

/// Validates, runs and writes one command.
pub fn run(cmd: &Command) -> Result<RunSummary, Failure> {
    let args = cmd.args();
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("masked-ntk-out").join(cmd.name()));
    let (config_echo, report) = match cmd {
        Command::MomentsCheck(_) => {
            let c: MomentsCheckConfig = load_seeded(args)?;
            require(c.validate())?;
            check_out_dir(&out)?;
            (json!(c), commands::moments_check(&c)?)
        }
        Command::ActivationSweep(_) => {
            let c: ActivationSweepConfig = load_seeded(args)?;
            require(c.validate())?;
            check_out_dir(&out)?;
            (json!(c), commands::activation_sweep(&c)?)
        }
        Command::LossDecomposition(_) => {
            let c: DecompositionConfig = load_seeded(args)?;
            require(c.validate(f64::MAX))?;
            instance_ok(&c.data, &c.network, &c.seeds, c.seed, true)?;
            check_out_dir(&out)?;
            (json!(c), commands::loss_decomposition(&c)?)
        }
        Command::GradientDecomposition(_) => {
            let c: DecompositionConfig = load_seeded(args)?;
            require(c.validate(1.0))?;
            instance_ok(&c.data, &c.network, &c.seeds, c.seed, false)?;
            check_out_dir(&out)?;
            (json!(c), commands::gradient_decomposition_sweep(&c)?)
        }
        Command::TrainSweep(_) => {
            let c: TrainSweepConfig = load_seeded(args)?;
            require(c.validate())?;
            instance_ok(&c.data, &c.network, &c.seeds, c.seed, c.convergence_report)?;
            check_out_dir(&out)?;
            (json!(c), commands::train_sweep(&c)?)
        }
        Command::FedavgSweep(_) => {
            let c: FedavgSweepConfig = load_seeded(args)?;
            require(c.validate())?;
            instance_ok(&c.data, &c.network, &c.seeds, c.seed, false)?;
            check_out_dir(&out)?;
            (json!(c), commands::fedavg_sweep(&c)?)
        }
        Command::NtkReport(_) => {
            let c: NtkReportConfig = load_seeded(args)?;
            require(c.validate())?;
            c.data
                .build(crate::seeding::derive_seed(c.seed, &[1, 0]))
                .map_err(|e| Failure::Config(vec![format!("data: {e}")]))?;
            check_out_dir(&out)?;
            (json!(c), commands::ntk_report(&c)?)
        }
    };
    write_outputs(&out, cmd.name(), config_echo, &report)?;
    Ok(RunSummary { out_dir: out, report })
}

fn write_outputs(out: &Path, command: &str, config: serde_json::Value, report: &Report) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Run(format!("{}: {e}", out.display())))?;
    for a in &report.artifacts {
        match a {
            Artifact::Csv { name, header, rows } => write_csv(&out.join(name), header, rows)?,
            Artifact::Json { name, value } => write_json(&out.join(name), value)?,
            Artifact::Kernel { name, kernel } => write_kernel(&out.join(name), kernel)?,
        }
    }
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seeds": report.seeds,
        "checks": report.checks,
        "all_pass": report.checks.iter().all(|c| c.pass),
    });
    write_json(&out.join("meta.json"), &meta)?;
    Ok(())
}
