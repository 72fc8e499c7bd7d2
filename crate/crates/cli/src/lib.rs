//! Command-line front end: configuration loading, cost tables, parameter
//! matching, training and evaluation runs, checkpoints, attention-map export
//! and the gradient-check suite.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod export;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use switchhead_core::Error;

/// Failure of one invocation, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation: missing files, unreadable or invalid configuration.
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_) | Error::Parse(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "switchhead", version, about = "Mixture-of-experts attention experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set model.attention.E=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MAC and memory table of attention layers.
    Cost(Common),
    /// Size a model to a parameter budget.
    Match(Common),
    /// Train a model and write metrics, checkpoint and summary.
    Train(Common),
    /// Evaluate a checkpoint on the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write attention maps and expert selections of one input as CSV grids.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input sequence: ListOps text for ListOps models, raw text otherwise.
        #[arg(long)]
        input: String,
        /// Export only this head (the max-over-heads map still uses all).
        #[arg(long)]
        head: Option<usize>,
    },
    /// Finite-difference check of every attention variant and SwitchAll.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

/// Runs one parsed invocation, printing its report to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Cost(c) => commands::cost(&c),
        Command::Match(c) => commands::matching(&c),
        Command::Train(c) => commands::train(&c).map(|_| ()),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint).map(|_| ()),
        Command::ExportAttn { common, checkpoint, input, head } => export::export_attn(&common, &checkpoint, &input, head),
        Command::Gradcheck { common, seeds } => commands::gradcheck(&common, seeds),
    }
}
