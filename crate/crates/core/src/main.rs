use std::process::ExitCode;

use clap::Parser;
use masked_ntk::cli::{configure_threads, run, Cli, Failure};

fn report_failure(f: &Failure) {
    match f {
        Failure::Config(errs) => {
            eprintln!("config error:");
            for e in errs {
                eprintln!("  {e}");
            }
        }
        Failure::Run(msg) => eprintln!("error: {msg}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        report_failure(&f);
        return ExitCode::from(f.exit_code());
    }
    match run(&cli.command) {
        Ok(summary) => {
            for c in &summary.report.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("outputs in {}", summary.out_dir.display());
            if summary.all_pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(f) => {
            report_failure(&f);
            ExitCode::from(f.exit_code())
        }
    }
}
