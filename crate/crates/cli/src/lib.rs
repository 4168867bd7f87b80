//! Library behind the `grpo-lab` binary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod artifacts;
pub mod commands;
pub mod config;

pub use config::Format;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or input files. Exit status 1.
    #[error("{0}")]
    Validation(String),
    /// A run that started but could not finish. Exit status 2.
    #[error("{0}")]
    Runtime(String),
    /// Verification ran and at least one check failed. Exit status 3.
    #[error("{0}")]
    VerificationFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::VerificationFailed(_) => 3,
        }
    }
}

impl From<grpo_core::Error> for CliError {
    fn from(e: grpo_core::Error) -> Self {
        use grpo_core::Error::*;
        match e {
            InvalidInput(_) | InvalidConfig(_) | SpecLoad { .. } => {
                CliError::Validation(e.to_string())
            }
            NonFinite { .. } | Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "grpo-lab",
    version,
    about = "GRPO and GRPO++ on a synthetic diagnosis task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one policy from an experiment file.
    Train(TrainArgs),
    /// Train GRPO and GRPO++ side by side over several seeds.
    Compare(CompareArgs),
    /// Run the gradient checks.
    Verify(VerifyArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, env = "GRPO_LAB_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Number of seeds.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub first_seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Section {
    FailureModes,
    Identity,
    Bounds,
    Gradient,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Comma-separated subset of checks; all by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub only: Vec<Section>,
    /// Groups fuzzed for the bound audit.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Random groups for the identity check.
    #[arg(long, default_value_t = 100)]
    pub identity_groups: usize,
    /// Finite-difference audit cases.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Group size for the failure-mode demos.
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, env = "GRPO_LAB_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Single,
    Vote,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: EvalMode,
    /// Votes per item in vote mode.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 20)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0.9)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "GRPO_LAB_OUT", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub format: Format,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => commands::cmd_train(&args).map(|_| ()),
        Command::Compare(args) => commands::cmd_compare(&args).map(|_| ()),
        Command::Verify(args) => commands::cmd_verify(&args).map(|_| ()),
        Command::Eval(args) => commands::cmd_eval(&args).map(|_| ()),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
