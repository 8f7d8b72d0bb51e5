use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clsa_cli::{cmd_covariance, cmd_run, cmd_theory, init_workers, CliResult, ExperimentConfig, Overrides};

/// Compressed least-mean-squares experiments.
///
/// Set CLSA_WORKERS to bound the number of worker threads.
#[derive(Parser)]
#[command(name = "clsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every run variant and write trajectories and a summary.
    Run(Common),
    /// Tabulate compressor covariances against ω.
    Covariance(Common),
    /// Evaluate the convergence bounds for every run variant.
    Theory(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Output directory (overrides `outputs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds (overrides `seeds`).
    #[arg(long)]
    seeds: Option<usize>,
    /// Horizon K (overrides `horizon`).
    #[arg(long)]
    horizon: Option<usize>,
}

fn dispatch(cli: Cli) -> CliResult<()> {
    init_workers()?;
    let (common, f): (Common, fn(&ExperimentConfig) -> CliResult<()>) = match cli.command {
        Command::Run(c) => (c, cmd_run),
        Command::Covariance(c) => (c, cmd_covariance),
        Command::Theory(c) => (c, cmd_theory),
    };
    let overrides = Overrides {
        out: common.out,
        seeds: common.seeds,
        horizon: common.horizon,
    };
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    f(&cfg)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
