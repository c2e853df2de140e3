//! `pathloss` command-line front end.
//!
//! Stages talk through files in the output directory:
//! `synth → ingest → fit → {anova, residuals, calibrate} → report`.

mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pathloss_core::Error;

use crate::config::RunConfig;

/// Failure with its exit code: 1 internal, 2 input, 3 empty result.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn internal(kind: &str, message: impl Into<String>) -> Self {
        Self { code: 1, kind: kind.into(), message: message.into() }
    }

    pub fn input(kind: &str, message: impl Into<String>) -> Self {
        Self { code: 2, kind: kind.into(), message: message.into() }
    }

    pub fn empty(kind: &str, message: impl Into<String>) -> Self {
        Self { code: 3, kind: kind.into(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "code": self.code, "kind": self.kind, "message": self.message }
        })
        .to_string()
    }
}

/// Variant name of a core error, e.g. `MissingColumn`.
fn variant_name(e: &Error) -> String {
    format!("{e:?}").chars().take_while(|c| c.is_ascii_alphanumeric()).collect()
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let root = e.root();
        let kind = variant_name(root);
        let code = match root {
            Error::MissingColumn(_)
            | Error::RowParseError { .. }
            | Error::EmptyFile
            | Error::ColumnMismatch(_)
            | Error::NonPositiveDistance(_)
            | Error::InconsistentFrequency
            | Error::DeviceTooSmall(_)
            | Error::DeviceSpanTooShort(_)
            | Error::InvalidTruth(_)
            | Error::InvalidInput(_)
            | Error::InsufficientReplicates { .. } => 2,
            Error::AllRowsDropped | Error::EmptySample => 3,
            _ => 1,
        };
        Self { code, kind, message }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pathloss", version, about = "Environment-aware indoor path-loss modelling and fade-margin calibration")]
pub struct Cli {
    /// Root seed; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic campaign with known ground truth.
    Synth {
        #[arg(long)]
        n_per_device: Option<usize>,
    },
    /// Parse, deduplicate, filter and outlier-clean a campaign file.
    Ingest {
        /// Campaign CSV; defaults to the config input, then `<out-dir>/campaign.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Cross-validate each model, refit on the training split and predict the hold-out.
    Fit {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Type II/III ANOVA, VIFs and nested block tests on the training split.
    Anova,
    /// Residual-law selection and shadow-fading diagnostics.
    Residuals {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Fade-margin prescriptions, intervals and hold-out delivery ratios.
    Calibrate {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Collect the stage reports into one summary.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Fit { .. } => "fit",
            Command::Anova => "anova",
            Command::Residuals { .. } => "residuals",
            Command::Calibrate { .. } => "calibrate",
            Command::Report => "report",
        }
    }
}

fn resolve_config(cli: &mut Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &mut cli.command {
        Command::Synth { n_per_device: Some(n) } => cfg.synth.n_per_device = *n,
        Command::Ingest { input } => {
            if let Some(p) = input.take() {
                cfg.input = Some(p);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(mut cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&mut cli)?;
    pipeline::dispatch(&cli.command, &cfg, cli.out_dir.clone())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
