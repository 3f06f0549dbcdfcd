//! Command-line front end for the cure-surrogate pipeline.
//!
//! Every command reads one JSON run config, applies the scalar flag
//! overrides, executes a single pipeline stage, and writes its artifacts
//! under `out_dir` together with the resolved config. Given the same config
//! and seed, a command reproduces its outputs byte for byte.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use cureonet::{Error, Result};

#[derive(Parser)]
#[command(name = "cureonet", version, about = "Cure-process surrogate pipeline")]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; beats the CUREONET_SEED environment variable and the
    /// config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 disables parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory receiving all stage outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cure-cycle dataset over the schedule grid.
    Generate,
    /// Fit one surrogate by gradient descent.
    Train,
    /// Fit a seed ensemble of surrogates.
    Ensemble,
    /// Calibrate a particle ensemble with Kalman iterations.
    EkiTrain,
    /// Adapt a trained surrogate to one measured cure cycle.
    Transfer,
    /// Adapt a particle ensemble to one measured cure cycle.
    EkiTransfer,
    /// Predict cure histories for one schedule.
    Predict,
    /// Write mean and spread bands from an ensemble or checkpoint.
    Bands,
    /// Search the schedule grid for the flattest feasible cure.
    Optimize,
}

fn run(cli: &Cli) -> Result<()> {
    let over = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        out_dir: cli.out_dir.clone(),
    };
    let cfg = RunConfig::load(cli.config.as_deref())?.resolve(&over)?;
    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::config(format!("cannot configure {workers} workers: {e}")))?;
    }
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Ensemble => commands::cmd_ensemble(&cfg),
        Command::EkiTrain => commands::cmd_eki_train(&cfg),
        Command::Transfer => commands::cmd_transfer(&cfg),
        Command::EkiTransfer => commands::cmd_eki_transfer(&cfg),
        Command::Predict => commands::cmd_predict(&cfg),
        Command::Bands => commands::cmd_bands(&cfg),
        Command::Optimize => commands::cmd_optimize(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cureonet: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Io(_) => 3,
                Error::Numerical(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
