//! `kpiforge` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 refresh
//! recommended by `monitor`, 4 data error. Failures print one line to stderr.

pub mod config;
pub mod error;

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::ProjectConfig;
pub use error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "kpiforge", version, about = "Derive and monitor micro-KPIs with random-forest variable importance")]
pub struct Cli {
    /// Project configuration file.
    #[arg(long, global = true, env = "KPIFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a forest on the project data and write the model and its OOB metrics.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compute MDI, permutation importance and stability for a trained model.
    Importance {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Propose micro-KPI candidates for a macro KPI from an importance report.
    Derive(DeriveArgs),
    /// Confirm, reject or merge micro-KPI candidates.
    Review(ReviewArgs),
    /// Re-run importance on a fresh data window and check for ranking drift.
    Monitor(MonitorArgs),
    /// Generate a synthetic dataset with known informative features.
    Synth(SynthArgs),
    /// Inspect report files, the registry, or evaluate an intervention.
    Report {
        #[command(subcommand)]
        what: ReportCommand,
    },
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Macro KPI id from the config.
    #[arg(long = "macro")]
    pub macro_id: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub stability: Option<PathBuf>,
    /// Use an absolute permutation-drop threshold instead of the relative rule.
    #[arg(long, allow_negative_numbers = true)]
    pub min_perm_drop: Option<f64>,
    #[arg(long)]
    pub min_stability: Option<f64>,
    #[arg(long)]
    pub max_candidates: Option<usize>,
    /// Ledger timestamp (RFC 3339); defaults to now.
    #[arg(long)]
    pub at: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReviewDecision {
    Confirm,
    Reject,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(required_unless_present = "merge", conflicts_with = "merge")]
    pub candidate: Option<String>,
    #[arg(value_enum, required_unless_present = "merge")]
    pub decision: Option<ReviewDecision>,
    /// Candidate to merge; repeat for each one.
    #[arg(long, num_args = 1)]
    pub merge: Vec<String>,
    #[arg(long)]
    pub by: String,
    #[arg(long, default_value = "")]
    pub rationale: String,
    /// Measurement definition for the candidate.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub at: Option<String>,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub rho_threshold: Option<f64>,
    #[arg(long = "macro")]
    pub macro_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `swap`, `scale=<factor>` or `shift=<delta>`.
    #[arg(long)]
    pub mutate: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Print a summary of any kpiforge report, model or registry file.
    Show { path: PathBuf },
    /// List macro KPIs and candidates in the registry.
    Registry,
    /// Compare a macro KPI between a before and an after window.
    Intervention {
        #[arg(long = "macro")]
        macro_id: String,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// writing summaries to `out`. Returns the exit code on success.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> Result<i32, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return Ok(exit::OK);
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::config(first.trim_start_matches("error: ")));
        }
    };
    commands::dispatch(cli, out)
}

/// Runs the CLI and returns the process exit code, printing errors to stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
