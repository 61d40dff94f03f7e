//! `orpf` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.

mod commands;
mod trace_csv;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "orpf",
    version,
    about = "Microgrid reactive-power optimization by randomized cluster updates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Model,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Clustering {
    /// Clusters listed in the network file.
    File,
    /// Edge-disjoint clustering built from the grid (radial grids only).
    Optimal,
    /// One pair {PCC, v} per compensator.
    Star,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the exact power flow with its first-order approximation.
    Validate {
        /// Network file, or `@ieee37` / `@path3` for a bundled network.
        network: String,
        /// Voltage scale factors for the remainder study.
        #[arg(long, default_value = "1,2,4", value_delimiter = ',')]
        scale: Vec<f64>,
        /// Print a JSON report instead of tables.
        #[arg(long)]
        json: bool,
    },
    /// Run the randomized procedure and write the trace as CSV.
    Run {
        /// Network file, or `@name` for a bundled network.
        network: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Model)]
        mode: ModeArg,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Clustering::File)]
        clustering: Clustering,
        /// Leave exact losses out of the trace (faster; summary losses are still computed).
        #[arg(long)]
        no_losses: bool,
    },
    /// Spectral analysis of a cluster set, printed as JSON.
    Analyze {
        /// Network file, or `@name` for a bundled network.
        network: String,
        #[arg(long, value_enum, default_value_t = Clustering::File)]
        clustering: Clustering,
        /// JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the edge-disjoint clustering and write the network file with it.
    Cluster {
        /// Network file, or `@name` for a bundled network.
        network: String,
        /// Output network path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Validate {
            network,
            scale,
            json,
        } => commands::validate(&network, &scale, json),
        Command::Run {
            network,
            mode,
            iters,
            seed,
            out,
            clustering,
            no_losses,
        } => commands::run(
            &network,
            mode,
            iters,
            seed,
            out.as_deref(),
            clustering,
            !no_losses,
        ),
        Command::Analyze {
            network,
            clustering,
            out,
        } => commands::analyze(&network, clustering, out.as_deref()),
        Command::Cluster { network, out } => commands::cluster(&network, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
