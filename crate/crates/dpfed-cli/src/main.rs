//! `dpfed`: train federated-DP models, attack their capture surfaces,
//! account privacy ledgers, and compare configurations side by side.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error (with
//! line/field diagnostics where available), 3 file or dataset IO error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "dpfed",
    version,
    about = "Desk-scale laboratory for differentially private federated learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federated model from an experiment config
    Train(RunArgs),
    /// Reconstruct victim examples from a capture surface
    Attack(RunArgs),
    /// Compute privacy spending from a ledger file
    Account(AccountArgs),
    /// Train several configs on one dataset and tabulate them
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    /// Ledger file (lines of t,l,sigma,S,q,mechanism)
    ledger: PathBuf,
    /// Accounting method: base, advanced, zcdp, moments, or all
    #[arg(long, default_value = "all")]
    method: String,
    /// Failure probability the ledger was collected under
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// Directory for account.csv
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment configs (at least two, same dataset)
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Override every config's master_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for compare.csv
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Command failure carrying the process exit code.
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError { code: 2, message: message.into() }
    }

    fn io(message: impl Into<String>) -> CliError {
        CliError { code: 3, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> CliError {
        CliError { code: 1, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Attack(args) => commands::attack(&args),
        Command::Account(args) => commands::account(&args),
        Command::Compare(args) => commands::compare(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
