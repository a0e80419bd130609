//! The `geomamba` command: synthesis, preprocessing, training, evaluation,
//! ablations and gradient checks from one binary.

pub mod config;
pub mod svg;

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geomamba::eval::Protocol;
use geomamba::trainer::TrainError;
use thiserror::Error;

pub use config::CliConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Io { .. } | TrainError::Exists(_) | TrainError::Checkpoint(_) => CliError::Io(e.to_string()),
            TrainError::Data(ref d) => match d {
                geomamba::synthdata::DataError::Config(_) => CliError::Usage(e.to_string()),
                _ => CliError::Io(e.to_string()),
            },
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<geomamba::synthdata::DataError> for CliError {
    fn from(e: geomamba::synthdata::DataError) -> Self {
        CliError::from(TrainError::Data(e))
    }
}

/// Flags shared by every command; each has a config-file key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset root containing `manifest.jsonl`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lambda_gcc: Option<f64>,
    #[arg(long, global = true)]
    pub no_gfi: bool,
    #[arg(long, global = true)]
    pub no_gcc: bool,
    /// all, o2s or s2o; default reports all three.
    #[arg(long, global = true)]
    pub protocol: Option<Protocol>,
    /// Single-threaded loading and synthesis.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Parser)]
#[command(name = "geomamba", version, about = "Optical/SAR fine-grained retrieval workflow")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset into --out.
    Synth,
    /// Write preprocessed images and pseudo-label masks of --data into --out.
    Preprocess,
    /// Train on --data; writes a run directory into --out.
    Train,
    /// Score a checkpoint on --data, or exported embeddings.
    Eval {
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        /// Directory with `query.{bin,jsonl}` and `gallery.{bin,jsonl}`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Length of the written ranked lists.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Train every variant under every seed.
    Ablate {
        /// Comma-separated; overrides `seeds` in the config file.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// One full-model run per λ_GCC value.
    SweepLambda {
        /// Comma-separated; overrides `lambdas` in the config file.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Finite-difference gradient checks; exit 2 on any failure.
    Gradcheck,
    /// Write query/gallery embeddings of a checkpoint on --data.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Runs an already parsed command line.
pub fn run_cli(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = CliConfig::load(cli.overrides.config.as_deref())?;
    cfg.apply(&cli.overrides);
    commands::dispatch(&cli.command, &cfg)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run_cli(&cli)
}

/// Entry point of the binary: help and version exit 0, parse errors 1,
/// command errors their own code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run_cli(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
