//! Command-line front end for the indifference-pricing laboratory.
//!
//! Exit codes: 0 success, 2 input validation failure, 3 solver failure,
//! 4 a checked property was falsified, 64 unknown flags or bad usage.

mod commands;
mod model_file;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("property falsified: {0}")]
    Falsified(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Falsified(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<weakinfo::Error> for CliError {
    fn from(err: weakinfo::Error) -> Self {
        match err {
            weakinfo::Error::SolverFailure(_)
            | weakinfo::Error::MartingalePropertyViolation(_) => {
                CliError::Solver(err.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "weakinfo",
    version,
    about = "Indifference pricing and information-stability experiments on finite event trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Check a model or counterexample file and summarize its contents
    Validate {
        model: PathBuf,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the optimal investment problem and its dual under the base measure
    Solve {
        model: PathBuf,
        /// Initial capital
        #[arg(long)]
        x: f64,
        /// Utility override: "log" or "power:<p>"
        #[arg(long)]
        utility: Option<String>,
        /// Include the martingale constraint matrix in the report
        #[arg(long)]
        dump_constraints: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the indifference price of a named claim
    Price {
        model: PathBuf,
        /// Claim name from the model file
        #[arg(long)]
        claim: String,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        utility: Option<String>,
        /// Definitional-check tolerance (default 1e-6)
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-quantity definitional slacks as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Price a claim under every scenario and report the spread
    Invariance {
        model: PathBuf,
        /// Claim name, or "random-bounded:<count>" / "random-replicable:<count>"
        #[arg(long)]
        claim: String,
        /// Comma-separated scenario names (default: all scenarios)
        #[arg(long)]
        scenario_set: Option<String>,
        /// Seed for the random claim samplers (default 7)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Minimal measure of the file's weak information and its value
    Weakinfo {
        model: PathBuf,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        utility: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence sweep along a vanishing measure perturbation
    Stability {
        model: PathBuf,
        /// One of: value, optimizer, price
        #[arg(long)]
        experiment: String,
        /// Largest perturbation index (sweep visits powers of two up to it)
        #[arg(long, default_value_t = 10_000)]
        n_max: usize,
        /// Claim name (required for --experiment price)
        #[arg(long)]
        claim: Option<String>,
        /// Initial capital (default 1.0)
        #[arg(long)]
        x: Option<f64>,
        #[arg(long)]
        utility: Option<String>,
        /// Scenario whose measure starts the perturbation (default: first
        /// scenario that differs from the base measure)
        #[arg(long)]
        scenario_set: Option<String>,
        /// Override the convergence tolerance used for the verdict
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write (n, primary gap) pairs for plotting
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
    /// Run a truncated-integral divergence sweep from a counterexample file
    Counterexample {
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        plot_data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::new()
        .parse_filters(&std::env::var("WEAKINFO_LOG").unwrap_or_else(|_| "error".into()))
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
