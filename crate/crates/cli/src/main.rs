//! `dst`: preprocess corpora, render slot descriptions, train and evaluate
//! runs, sweep experiment grids and report their results.

mod commands;
mod report;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dst_core::trainer::{BackendKind, ExperimentConfig, DATA_ROOT_ENV};
use dst_core::ErrorCategory;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CAPABILITY: u8 = 4;
pub const EXIT_RUN: u8 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "dst",
    version,
    about = "Generative dialogue state tracking with slot descriptions"
)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace). Overridden by RUST_LOG.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert MultiWOZ-format files (or a synthetic corpus) into a preprocessed corpus.
    Preprocess(commands::PreprocessArgs),
    /// Render slot descriptions for every schema slot.
    Describe(commands::DescribeArgs),
    /// Train one run (and optionally evaluate it).
    Train(commands::TrainArgs),
    /// Score a finished run on its test split.
    Evaluate(commands::EvaluateArgs),
    /// Train and evaluate the domains x seeds x variants grid, then summarize it.
    Sweep(sweep::SweepArgs),
    /// Summarize result records into tables and per-slot bar charts.
    Report(report::ReportArgs),
}

/// Flags shared by every command that builds an experiment configuration.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set tiny.d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Sequence-to-sequence backend.
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Root directory for run outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn build(&self) -> dst_core::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for assignment in &self.overrides {
            config.apply_override(assignment)?;
        }
        if let Some(backend) = self.backend {
            config.backend = backend;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "tiny" => Ok(BackendKind::Tiny),
        "pretrained" => Ok(BackendKind::Pretrained),
        other => Err(format!("unknown backend `{other}` (expected tiny or pretrained)")),
    }
}

/// Resolves a relative input path against the data root when it is set.
pub fn data_path(path: &std::path::Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Maps an error to the documented process exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<dst_core::Error>())
        .map(dst_core::Error::category);
    match category {
        Some(ErrorCategory::Config) => EXIT_CONFIG,
        Some(ErrorCategory::Data) => EXIT_DATA,
        Some(ErrorCategory::Capability) => EXIT_CAPABILITY,
        Some(ErrorCategory::Run) | None => EXIT_RUN,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    let outcome = match cli.command {
        Command::Preprocess(args) => commands::preprocess(&args),
        Command::Describe(args) => commands::describe(&args),
        Command::Train(args) => commands::train(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Sweep(args) => sweep::sweep(&args),
        Command::Report(args) => report::report(&args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
