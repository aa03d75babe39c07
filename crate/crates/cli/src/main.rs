//! `unida-bench`: benchmark runner for universal domain adaptation on time
//! series.
//!
//! Three subcommands share one TOML config format:
//! - `run`    — Bayesian model selection for one method/backbone pair, then
//!   a multi-seed evaluation of the winning hyperparameters.
//! - `matrix` — every configured method x backbone cell on the same
//!   evaluation scenarios.
//! - `report` — rebuild all tables from the append-only trial logs.
//!
//! Exit codes: 0 success, 2 bad input (config, flags, unreadable logs),
//! 3 runtime failure.

mod config;
mod exec;
mod logs;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "unida-bench", about = "universal domain adaptation benchmark for time series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Select hyperparameters on validation scenarios, evaluate the best.
    Run(RunArgs),
    /// Evaluate the full method x backbone grid.
    Matrix(RunArgs),
    /// Rebuild result tables from logged trials.
    Report(OutArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for logs and tables.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for independent trials.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the config's master_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OutArgs {
    /// Directory holding `trials.jsonl` logs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

/// An error tagged with the exit code it should produce.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(err: anyhow::Error) -> Self {
        Failure { code: 2, err }
    }

    fn runtime(err: anyhow::Error) -> Self {
        Failure { code: 3, err }
    }
}

fn init_jobs(jobs: usize) -> Result<(), Failure> {
    if jobs == 0 {
        return Err(Failure::config(anyhow!("--jobs must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Failure::runtime(anyhow!("cannot start {jobs} worker threads: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(args) => {
            init_jobs(args.jobs)?;
            let exp = config::prepare(&args.config, args.seed).map_err(Failure::config)?;
            config::check_run(&exp).map_err(Failure::config)?;
            exec::cmd_run(&exp, &args.out).map_err(Failure::runtime)
        }
        Cmd::Matrix(args) => {
            init_jobs(args.jobs)?;
            let exp = config::prepare(&args.config, args.seed).map_err(Failure::config)?;
            config::check_matrix(&exp).map_err(Failure::config)?;
            exec::cmd_matrix(&exp, &args.out).map_err(Failure::runtime)
        }
        Cmd::Report(args) => {
            let lines = logs::read_log_dir(&args.out).map_err(Failure::config)?;
            exec::render_tables(&args.out, &lines, None).map_err(Failure::runtime)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
