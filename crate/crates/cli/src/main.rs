mod compare;
mod flops;
mod inspect;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Layer-dropping CNN training runs, comparisons and cost tables.
#[derive(Debug, Parser)]
#[command(name = "learndrop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write its report bundle.
    Train(train::TrainArgs),
    /// Summarize finished runs against their sgd baseline.
    Compare {
        /// Run directories written by `train`; exactly one must use sgd.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-stage and cumulative forward MACs of an architecture.
    Flops(flops::FlopsArgs),
    /// Print a feature cache manifest and check every record.
    InspectCache {
        /// Cache data file or its `.json` manifest.
        path: PathBuf,
    },
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Compare { runs, csv } => compare::run(&runs, csv.as_deref()),
        Command::Flops(args) => flops::run(args),
        Command::InspectCache { path } => inspect::run(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
