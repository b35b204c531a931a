use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod output;

/// Exit code 2: bad config, failed validation, grid cap, I/O.
/// Exit code 3: numerical failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] corrnoise::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "corrnoise", version, about = "Correlated-noise filtering experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (speed only; results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate joint, product or reference paths.
    Simulate,
    /// Schur oracle, Kalman recursion and Gibbs importance posterior.
    Filter,
    /// Free-energy report over a candidate family.
    FreeEnergy,
    /// Radon-Nikodym degeneration and quadratic covariation experiments.
    Singularity,
    /// Parse the config and validate the model.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::FreeEnergy => "free-energy",
            Command::Singularity => "singularity",
            Command::Validate => "validate",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size the thread pool: {e}")))?;
    }
    let path = cli.config.ok_or_else(|| CliError::config("--config <path> is required"))?;
    let loaded = config::load(&path)?;
    let ctx = commands::Context::new(loaded, cli.seed, cli.out, cli.command.name())?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Filter => commands::filter(&ctx),
        Command::FreeEnergy => commands::free_energy(&ctx),
        Command::Singularity => commands::singularity(&ctx),
        Command::Validate => commands::validate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
