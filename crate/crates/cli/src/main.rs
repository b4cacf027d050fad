//! `survsens`: simulate data, fit at one sensitivity point, sweep a grid and
//! draw contours, all driven by one TOML configuration file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "survsens", version, about = "Sensitivity analysis for an unmeasured binary confounder in survival and competing-risks models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset; writes data.csv and true_u.csv
    Simulate(Common),
    /// Estimate every treatment effect at one sensitivity point
    Fit(Common),
    /// Estimate over a sensitivity grid; writes grid.csv/json/svg
    Grid(Common),
    /// Contour a grid; writes contours.json and SVG plots
    Contour(Common),
}

/// Flags shared by every subcommand; each override beats the config file.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file (TOML)
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Estimator: em, sto_em, ipw, no_u, true_u
    #[arg(long, value_name = "NAME")]
    pub method: Option<String>,
    /// Worker threads for grid
    #[arg(long)]
    pub threads: Option<usize>,
}

fn main() -> ExitCode {
    let keys = config::keys_help();
    let cmd = Cli::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|s| s.after_long_help(keys.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let outcome = match &cli.command {
        Command::Simulate(c) => commands::simulate(c),
        Command::Fit(c) => commands::fit(c),
        Command::Grid(c) => commands::grid(c),
        Command::Contour(c) => commands::contour(c),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
