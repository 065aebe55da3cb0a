//! The `sifm` command line: data generation, training, evaluation,
//! forecasting, gradient audits and ablations.

mod commands;
mod config;
mod pgm;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{GRADCHECK_TOL, SINGLE_PRECISION_TOL};
pub use config::{PathsConfig, RunConfig};
pub use pgm::{residual_pgm, residual_pixel};

use crate::error::SifmError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<SifmError> for CliError {
    fn from(e: SifmError) -> Self {
        let code = match e {
            SifmError::Config(_) => EXIT_CONFIG,
            SifmError::Checkpoint(_) => EXIT_CHECKPOINT,
            SifmError::Contract(_) => EXIT_CHECK,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

pub(crate) trait ExitCode<T> {
    /// Reports any error under `code`, prefixed with `what`.
    fn exit(self, code: i32, what: &str) -> Result<T, CliError>;
}

impl<T> ExitCode<T> for crate::Result<T> {
    fn exit(self, code: i32, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, format!("{what}: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "sifm", version, about = "Multi-granularity sea-ice concentration forecasting")]
pub struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic SICG series.
    Gen {
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint to write.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Loss log CSV (default: next to the checkpoint).
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint (or a baseline) on the test anchors.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score a reference forecaster instead of a checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Forecast from the end of a series (or from `--anchor`).
    Forecast {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Last observed day; defaults to the final day of the series.
        #[arg(long, value_name = "DAY")]
        anchor: Option<i64>,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference audit of every op and of the micro model.
    Gradcheck {
        /// Flip the sign of one op's backward rule to exercise the checker.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Coordinates probed per parameter tensor of the micro model.
        #[arg(long, default_value_t = 4)]
        entries: usize,
    },
    /// Train and score the six-run ablation matrix.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Input SICG series.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Newest input grid repeated for every lead.
    Persistence,
    /// The targets themselves.
    Oracle,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match commands::execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
