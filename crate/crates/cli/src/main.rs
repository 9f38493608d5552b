#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use levystop_core::Error;

mod commands;
mod config;

/// Optimal multi-stage stopping thresholds, value grids and verification reports.
#[derive(Parser, Debug)]
#[command(name = "levystop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Problem configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write the report or grid here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the configuration as loaded, with defaults filled in, and exit.
    #[arg(long, global = true)]
    echo_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve for the per-stage thresholds.
    Solve,
    /// Tabulate reward, Lambda and value functions on the output grid as CSV.
    ValueGrid {
        /// Threshold shifts, one comma-separated vector per flag or separated by ';'.
        #[arg(long, allow_hyphen_values = true)]
        perturb: Vec<String>,
    },
    /// Check the analytic solution by simulation and the generator residual.
    Verify {
        /// Override the simulation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulate thresholds shifted by this amount instead of the optimal ones.
        #[arg(long, allow_hyphen_values = true)]
        threshold_shift: Option<f64>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(Error),
    VerificationFailed,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::VerificationFailed => write!(f, "verification failed"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Error::ConvergenceFailure(_)) => 3,
            CliError::VerificationFailed => 4,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEVYSTOP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("levystop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = config::load(&path)?;
    if cli.echo_config {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
        return commands::emit(cli.out.as_deref(), &(text + "\n"));
    }
    let problem = cfg.build()?;
    match cli.command {
        Command::Solve => commands::solve(&problem, cli.out.as_deref()),
        Command::ValueGrid { perturb } => {
            let deltas = commands::parse_perturbations(&perturb, problem.spec.len())?;
            commands::value_grid(&problem, &deltas, cli.out.as_deref())
        }
        Command::Verify { seed, threshold_shift } => commands::verify(&problem, seed, threshold_shift.unwrap_or(0.0), cli.out.as_deref()),
    }
}
