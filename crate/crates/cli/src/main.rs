//! Command-line driver. Exit codes: 0 success, 2 config error, 3
//! runtime error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{dispatch, CliError, COMMANDS};
use config::Raw;

#[derive(Parser)]
#[command(
    name = "fedpriv",
    about = "Simulation driver for distributed private goodness-of-fit tests",
    long_about = None
)]
struct Cli {
    /// One of: rates, regimes, calibrate, risk, boundary, compare, adaptive.
    command: String,

    /// Path to a flat key=value or JSON config file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory for the CSV table and JSON sidecar.
    #[arg(long, default_value = ".")]
    out: PathBuf,

    /// Worker threads. Output is byte-identical regardless of the count.
    #[arg(long, default_value_t = 1)]
    workers: usize,

    /// Master seed for every random stream in the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if !COMMANDS.contains(&cli.command.as_str()) {
        return Err(CliError::Config(format!(
            "unknown command `{}`; expected one of {}",
            cli.command,
            COMMANDS.join("|")
        )));
    }
    if cli.workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    let raw = Raw::from_file(&cli.config)?;
    dispatch(&cli.command, &raw, &cli.out, cli.seed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(3)
        }
    }
}
