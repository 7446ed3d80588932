//! Config-driven experiment runner around the `healthgen` library.
//!
//! Every subcommand reads and writes a single run directory:
//!
//! ```text
//! cohort/                 prepare-data
//! generators/<model>/     train-gen (checkpoint + curve.csv)
//! synthetic/<model>/      generate
//! tstr/ fairness/ augment/ privacy/
//! figures/                export-figures
//! manifests/<command>.json
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod config;
pub mod manifest;

pub use commands::{GapComparison, TstrOutput, FairnessEntry, SampleRow};
pub use config::{ExperimentConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {path}; run `healthgen {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error(transparent)]
    Core(#[from] healthgen::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Core(_) => "runtime",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "healthgen", version, about = "Conditional clinical time-series generation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; beats HEALTHGEN_OUT and the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Export only generated records with below-average missingness.
    #[arg(long)]
    pub preselect_low_missingness: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build the real cohort archive from the configured data source.
    PrepareData(CommonArgs),
    /// Fit every configured generator.
    TrainGen(CommonArgs),
    /// Sample a synthetic cohort from every trained generator.
    Generate(CommonArgs),
    /// Train-on-synthetic, test-on-real evaluation.
    Tstr(CommonArgs),
    /// Per-subgroup AUROC of the TSTR classifiers.
    Fairness(CommonArgs),
    /// Augment minority categories to parity and re-evaluate.
    Augment(CommonArgs),
    /// Nearest training records of generated patients in latent space.
    AuditPrivacy(CommonArgs),
    /// Figure-ready CSVs from completed runs.
    ExportFigures(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PrepareData(_) => "prepare-data",
            Command::TrainGen(_) => "train-gen",
            Command::Generate(_) => "generate",
            Command::Tstr(_) => "tstr",
            Command::Fairness(_) => "fairness",
            Command::Augment(_) => "augment",
            Command::AuditPrivacy(_) => "audit-privacy",
            Command::ExportFigures(_) => "export-figures",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::PrepareData(a)
            | Command::TrainGen(a)
            | Command::Generate(a)
            | Command::Tstr(a)
            | Command::Fairness(a)
            | Command::Augment(a)
            | Command::AuditPrivacy(a) => a,
            Command::ExportFigures(e) => &e.common,
        }
    }
}

/// Loads, overrides and validates the configuration, then runs the
/// command. Returns the manifest path.
pub fn run(command: &Command, env_out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let args = command.common();
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    let flags = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        preselect_low_missingness: matches!(command, Command::ExportFigures(e) if e.preselect_low_missingness),
    };
    cfg.apply(&flags, env_out);
    cfg.validate(command.name())?;
    commands::execute(command.name(), &cfg)
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
