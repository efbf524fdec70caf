//! Command-line surface over the gammaz library: scan curvature bounds,
//! verify the algebraic identities, run the dissipation simulator, list
//! the built-in structures.
//!
//! Exit codes: 0 success, 1 config error, 2 domain error, 3 tolerance
//! exceeded (the report is still written). Stdout carries only the
//! requested artifact; diagnostics go to stderr.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::process::ExitCode;

mod analyze;
mod common;
mod examples;
mod json;
mod simulate;
mod verify;

#[derive(Parser)]
#[command(
    name = "gammaz",
    version,
    about = "Curvature-dimension analysis for degenerate diffusion frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a box for the pointwise curvature lower bound.
    Analyze(analyze::AnalyzeArgs),
    /// Check the decomposition, measure, and commutator identities.
    Verify(verify::VerifyArgs),
    /// Integrate the dissipation flow and fit decay rates.
    Simulate(simulate::SimulateArgs),
    /// List the built-in structures.
    Examples(examples::ExamplesArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return ExitCode::from(if help { 0 } else { 1 });
        }
    };
    let result = match cli.command {
        Command::Analyze(args) => analyze::run(&args),
        Command::Verify(args) => verify::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::Examples(args) => examples::run(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
