use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use acktr::harness::{self, GridAxis, RunConfig};
use acktr::{oracle, Result};

#[derive(Parser)]
#[command(name = "acktr", version, about = "Train and check Kronecker-factored actor-critic agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set kfac.eta_max=0.2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train every cell of a Cartesian grid, one subdirectory per cell.
    Sweep {
        config: PathBuf,
        /// `section.key=v1,v2,...`; repeat for more axes.
        #[arg(long = "grid", value_name = "KEY=V1,V2", required = true)]
        grid: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Cells trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a sweep directory as CSV.
    Report { dir: PathBuf },
    /// Run the oracle invariant suite.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean and std learning curves across runs.
    PlotData {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, set: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| acktr::Error::Config { key: s.clone(), reason: "expected KEY=VALUE".into() })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Train { config, set } => {
            let cfg = load(&config, &set)?;
            let result = harness::run(&cfg)?;
            let last = result.metrics.last().and_then(|m| m.mean_reward_100);
            println!(
                "{}: {} updates, final mean reward {}",
                result.dir.display(),
                result.metrics.len(),
                last.map(harness::format_sig6).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Sweep { config, grid, set, jobs } => {
            let cfg = load(&config, &set)?;
            let axes = grid.iter().map(|g| g.parse()).collect::<Result<Vec<GridAxis>>>()?;
            for dir in harness::sweep(&cfg, &axes, jobs)? {
                println!("{}", dir.display());
            }
        }
        Command::Report { dir } => {
            let rows = harness::sweep_report(&dir)?;
            print!("{}", harness::format_report(&rows));
            return Ok(rows.iter().all(|r| r.complete));
        }
        Command::OracleCheck { seed } => {
            let checks = oracle::run_checks(seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::PlotData { runs, out } => {
            let logs = runs
                .iter()
                .map(|d| harness::read_metrics(&d.join(harness::METRICS_FILE)))
                .collect::<Result<Vec<_>>>()?;
            let text = harness::plot_data(&logs);
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| acktr::Error::Io { path, source: e })?,
                None => print!("{text}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
