//! Command-line front end.
//!
//! `dispatch` parses arguments, runs one pipeline and returns the process
//! exit code: 0 when the run completed, 1 on a usage error, 2 when the
//! environment or inputs could not be set up. Numeric results go to
//! `report.json` in the output directory as `{"payload": ..., "timing": ...}`;
//! only `timing` may differ between otherwise identical runs. Every run
//! also writes `run_manifest.json` beside its outputs.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Setup(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Setup(_) => 2,
        }
    }
}

pub(crate) fn setup(e: impl std::fmt::Display) -> CliError {
    CliError::Setup(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "sqlfix",
    version,
    about = "Evaluate, generate and collect SQL debugging tasks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML settings file.
    #[arg(long, global = true, env = "SQLFIX_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "SQLFIX_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SQLFIX_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, env = "SQLFIX_SEED")]
    pub seed: Option<u64>,
    /// Directory holding `<db>.sql`, `<db>.sqlite` or `<db>.db` files.
    #[arg(long, global = true, env = "SQLFIX_DB_DIR")]
    pub db_dir: Option<PathBuf>,
    /// copy (template copy) or rollback (transaction rollback).
    #[arg(long, global = true, env = "SQLFIX_ISOLATION")]
    pub isolation: Option<String>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long, global = true, env = "SQLFIX_PROMPTS")]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against task test cases.
    Eval {
        #[arg(long)]
        tasks: PathBuf,
        /// Line-delimited {task_id, predicted_sql} records.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Run agent episodes and score their final SQL.
    Agent(AgentArgs),
    /// Generate gym instances from a corpus of posts.
    Rewind(RewindArgs),
    /// Collect passing trajectories under a strategy.
    Collect(CollectArgs),
    /// Check that every task rejects its issue SQL and accepts its solution.
    Redteam {
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Dataset statistics.
    Stats {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 3)]
        ngram: usize,
        /// JSON file {"x": [...], "y": [...]} whose correlation is reported.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Convert stored trajectories to chat-formatted training records.
    Export {
        #[arg(long)]
        trajectories: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// `replay:<file>` or `remote[:<model>]`.
    #[arg(long)]
    pub backend: String,
    /// Action model for generative thought mode.
    #[arg(long)]
    pub actor: Option<String>,
    #[arg(long)]
    pub gtm: bool,
    #[arg(long, default_value_t = sqlfix_core::agent::DEFAULT_MAX_TURNS)]
    pub max_turns: usize,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sqlact,
    Toolact,
}

#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Sqlact)]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Args)]
pub struct RewindArgs {
    /// Line-delimited {source_id, title, body} records.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target databases (repeat or comma-separate).
    #[arg(long = "db", value_delimiter = ',', required = true)]
    pub dbs: Vec<String>,
    #[arg(long)]
    pub exclusion: Option<PathBuf>,
    #[arg(long)]
    pub backend: String,
    #[arg(long, default_value_t = 100)]
    pub target: usize,
    #[arg(long, default_value_t = sqlfix_core::rewind::DEFAULT_MAX_ITER)]
    pub max_iter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Baseline,
    Fplan,
    Rejection,
    RejectFplan,
}

#[derive(Debug, Clone, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[arg(long)]
    pub max_tries: Option<u32>,
    /// Keep sampling after the first passing try.
    #[arg(long)]
    pub no_early_stop: bool,
    /// Resumable progress file keyed by task id.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Record of what a run was asked to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub datasets: Vec<String>,
    pub backends: Vec<String>,
    pub out: String,
    pub seed: u64,
    pub workers: usize,
    pub version: String,
}

/// Runs one command, writing the human summary to `stdout`.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    Ok(())
                }
                _ => {
                    let text = e.render().to_string();
                    let text = text.strip_prefix("error: ").unwrap_or(&text);
                    Err(CliError::Usage(text.trim_end().to_string()))
                }
            };
        }
    };
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    commands::execute(cli, args, stdout)
}

/// Entry point used by the binary; returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout();
    match run(argv, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| setup(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| setup(format!("{}: {e}", path.display())))
}
