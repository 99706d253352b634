//! `tsm`: batch runner for hierarchical market clearing experiments.
//!
//! Every subcommand reads a JSON scenario (see `README.md` for the schema),
//! writes JSON and long-format CSV files into `--out`, and prints a short
//! summary. Exit codes: 0 success, 1 domain failure (infeasible market,
//! unsupported constraints, or a failed verdict under `--strict`), 2 usage
//! error.

mod commands;
mod grid;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsm_core::allocation::Mechanism;
use tsm_core::clearing::ClearingMode;

#[derive(Parser, Debug)]
#[command(name = "tsm", version, about = "Hierarchical market clearing experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Directory all other paths are relative to.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Output directory, relative to the working directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Exit with status 1 when a verification verdict fails.
    #[arg(long, global = true)]
    strict: bool,
    /// Append simplex pivot traces to this file.
    #[arg(long, global = true, value_name = "FILE")]
    lp_trace: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clear the market and settle it.
    Clear {
        config: PathBuf,
        #[arg(long, default_value = "monolithic")]
        mode: ClearingMode,
    },
    /// Allocate surplus with one or more mechanisms.
    Allocate {
        config: PathBuf,
        /// Comma-separated list of shapley, vcg_marginal, marginal.
        #[arg(long, value_delimiter = ',', default_value = "shapley,vcg_marginal,marginal")]
        mechanisms: Vec<Mechanism>,
    },
    /// Sweep one leaf's reported cost and capacity.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        target: String,
        /// Factors as `start:stop:step` or a comma list; must include 1.0.
        #[arg(long, default_value = "0.5:1.5:0.05")]
        grid: String,
        /// Capacity factors, if different from `--grid`.
        #[arg(long)]
        cap_grid: Option<String>,
    },
    /// Check prices, incentive compatibility and aggregation assumptions.
    Verify {
        config: PathBuf,
        /// Random samples per sampled assumption check.
        #[arg(long, default_value_t = tsm_core::analysis::DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Run the storage/EV/TCL case study on a price-taking scenario.
    Casestudy {
        config: PathBuf,
        #[arg(long, default_value = "EV1")]
        target: String,
    },
    /// Run the experiments listed in the scenario file, in order.
    Run { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TSM_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(&cli.global, cli.command) {
        Ok(commands::Status::Passed) => ExitCode::SUCCESS,
        Ok(commands::Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
