use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use msdiff::harness::{emit, run, ExperimentConfig, ExperimentKind};

/// Runs one multiscale-diffusion experiment and writes its report.
///
/// Exit status: 0 when every decision passes, 1 on a threshold failure,
/// 2 on a configuration, validation or I/O error.
#[derive(Parser, Debug)]
#[command(name = "msdiff", version)]
struct Cli {
    /// coeff, met, clt, estimate, tail, poisson or hitting.
    #[arg(value_parser = parse_kind)]
    experiment: ExperimentKind,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `simulation.workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed; overrides `simulation.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    s.parse().map_err(|e: msdiff::Error| e.to_string())
}

fn execute(cli: Cli) -> msdiff::Result<bool> {
    let mut config = ExperimentConfig::from_path(&cli.config)?;
    config.experiment = cli.experiment;
    if let Some(w) = cli.workers {
        config.simulation.workers = w;
    }
    if let Some(s) = cli.seed {
        config.simulation.base_seed = s;
    }
    let dir = cli.out.unwrap_or_else(|| PathBuf::from(&config.output.directory));
    let report = run(&config)?;
    emit(&report, &dir, &config.output.formats)?;
    for d in &report.decisions {
        println!("{d}");
    }
    println!(
        "{} {}: {} steps in {:.2} s, output in {}",
        if report.passed { "PASS" } else { "FAIL" },
        report.experiment,
        report.steps,
        report.wall_clock_seconds,
        dir.display()
    );
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
