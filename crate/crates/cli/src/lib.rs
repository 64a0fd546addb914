//! Config-driven experiment runner behind the `octopus` binary.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Exit code for invalid configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures after compute has started.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "octopus", version, about = "Distributed VQ autoencoder experiments")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Output directory; takes precedence over `out_dir` in the config.
    #[arg(long, env = config::OUT_DIR_ENV, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the initial global model on the additional data.
    TrainGlobal,
    /// One-shot local fine-tuning of a saved model on the node data.
    FineTune,
    /// Run the full protocol over simulated nodes.
    Simulate,
    /// Train the content classifier on latent codes and the raw baseline.
    TrainDownstream,
    /// Identity adversaries on public, private and combined latents.
    EvalPrivacy,
    /// Communication cost of FL, split learning and the protocol over a parameter grid.
    CostReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainGlobal => "train-global",
            Command::FineTune => "fine-tune",
            Command::Simulate => "simulate",
            Command::TrainDownstream => "train-downstream",
            Command::EvalPrivacy => "eval-privacy",
            Command::CostReport => "cost-report",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config { key: String, message: String },
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config { key: key.to_string(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { key, message } => write!(f, "config error: {key}: {message}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<octopus_core::Error> for CliError {
    fn from(e: octopus_core::Error) -> Self {
        match e {
            octopus_core::Error::Config(m) => CliError::config("config", m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Resolves the config and runs one command.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    commands::dispatch(cli.command, &cfg)
}

/// Parses `args` and runs; returns the process exit code.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("octopus {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
