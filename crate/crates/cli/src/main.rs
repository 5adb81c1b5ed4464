//! `newsfusion` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "newsfusion", version, about = "Fusion predictors, gated mixtures and decile backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic regime panel (MFNR file plus latents sidecar).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a predictor or mixture; writes a checkpoint and curves.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Decile backtest of a checkpoint.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Variance identity check, plus the entanglement probe of a mixture
    /// checkpoint when one is given.
    Varlab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, backtest and probe in one output directory.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Synth { common }
        | Command::Train { common, .. }
        | Command::Backtest { common, .. }
        | Command::Varlab { common, .. }
        | Command::Report { common, .. } => common,
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
    let out = &common.out;
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg, out),
        Command::Train { data, .. } => commands::train_cmd(&cfg, data.as_deref(), out),
        Command::Backtest { data, checkpoint, .. } => commands::backtest(&cfg, checkpoint, data.as_deref(), out),
        Command::Varlab { data, checkpoint, .. } => {
            commands::varlab(&cfg, checkpoint.as_deref(), data.as_deref(), out)
        }
        Command::Report { data, .. } => commands::report(&cfg, data.as_deref(), out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
