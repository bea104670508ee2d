use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod data;
mod eigen_check;
mod error;
mod fit;
mod output;
mod simulate;

/// Spatially filtered unconditional quantile regression.
#[derive(Debug, Parser)]
#[command(name = "sfuqr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a CSV and write coefficients, spatial parameters and diagnostics.
    Fit(fit::FitArgs),
    /// Write a synthetic data set drawn from the spatial random-effects model.
    Simulate(simulate::SimulateArgs),
    /// Compare Nyström and exact eigenpairs on the same sites.
    EigenCheck(eigen_check::EigenCheckArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Simulate(a) => simulate::run(a),
        Command::EigenCheck(a) => eigen_check::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
