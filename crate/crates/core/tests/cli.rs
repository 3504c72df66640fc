use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_masked-ntk"));
    c.env_remove("MASKED_NTK_THREADS");
    c
}

fn run(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let dir = out.parent().unwrap();
    let cfg = dir.join(format!("{cmd}-{}.json", out.file_name().unwrap().to_string_lossy()));
    fs::write(&cfg, config).unwrap();
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL_SWEEP: &str =
    r#"{"schema_version": 1, "seed": 5, "d": 4, "kappas": [0.01, 0.5], "z_min": -2.0, "z_max": 2.0, "z_points": 7, "mc_samples": 20000}"#;

#[test]
fn small_activation_sweep_passes_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run("activation-sweep", SMALL_SWEEP, &a, &[]);
    assert_eq!(first.status.code(), Some(0), "{}", text(&first));
    let second = run("activation-sweep", SMALL_SWEEP, &b, &[]);
    assert_eq!(second.status.code(), Some(0), "{}", text(&second));
    let csv_a = fs::read(a.join("activation_sweep.csv")).unwrap();
    let csv_b = fs::read(b.join("activation_sweep.csv")).unwrap();
    assert!(!csv_a.is_empty());
    assert_eq!(csv_a, csv_b);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, SMALL_SWEEP).unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = bin()
            .env("MASKED_NTK_THREADS", threads)
            .args(["activation-sweep", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        outs.push(fs::read(out.join("activation_sweep.csv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn perturbed_moment_fails_and_is_named() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"schema_version": 1, "seed": 20241017, "n_sets": 3, "mc_samples": 20000,
                  "perturb": {"moment": "truncated_first_moment", "delta": 1e-3}}"#;
    let o = run("moments-check", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL truncated_first_moment")), "{stdout}");
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["all_pass"], false);
    let failures = report["failures"].as_array().unwrap();
    assert!(!failures.is_empty());
    assert!(failures.iter().all(|f| f["moment"] == "truncated_first_moment"));
    assert_eq!(report["summary"]["truncated_second_moment"]["mc"]["failures"], 0);
}

#[test]
fn invalid_configs_exit_2_without_writing() {
    let cases = [
        ("moments-check", r#"{"schema_version": 1, "mc_samples": 1}"#, "mc_samples"),
        ("moments-check", r#"{"schema_version": 1, "n_sets": 2, "bogus": 3}"#, "bogus"),
        ("moments-check", r#"{"n_sets": 2}"#, "schema_version"),
        ("activation-sweep", r#"{"schema_version": 1, "kappas": [-0.1]}"#, "kappa"),
        ("train-sweep", r#"{"schema_version": 1, "eta": -1.0}"#, "eta"),
    ];
    for (cmd, cfg, needle) in cases {
        let tmp = TempDir::new().unwrap();
        let out = tmp.path().join("out");
        let o = run(cmd, cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{cmd} {cfg}: {}", text(&o));
        assert!(text(&o).contains(needle), "{cmd} {cfg}: {}", text(&o));
        assert!(!out.exists(), "{cmd} {cfg} created {}", out.display());
    }
}

#[test]
fn bad_thread_env_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, SMALL_SWEEP).unwrap();
    let out = tmp.path().join("out");
    let o = bin()
        .env("MASKED_NTK_THREADS", "abc")
        .args(["activation-sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("MASKED_NTK_THREADS"));
    assert!(!out.exists());
}

#[test]
fn out_path_that_is_a_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("occupied");
    fs::write(&out, "x").unwrap();
    let o = run("activation-sweep", SMALL_SWEEP, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn seed_override_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run("activation-sweep", SMALL_SWEEP, &out, &["--seed", "4242"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 4242);
    assert_eq!(meta["seeds"]["base"], 4242);
    assert_eq!(meta["command"], "activation-sweep");
    assert_eq!(meta["all_pass"], true);
}

#[test]
fn small_ntk_report_writes_kernels() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"schema_version": 1, "data": {"n": 6, "d": 4}, "datasets": 3, "widths": [50, 5000], "net_seeds": 4}"#;
    let o = run("ntk-report", cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    for f in ["h_infinity.csv", "empirical_m50.csv", "empirical_m5000.csv", "ntk_report.json", "meta.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}
