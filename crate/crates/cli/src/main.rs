mod common;
mod gen;
mod mask_stats;
mod oracle;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use common::{exit_code_for, EXIT_CONFIG};

/// Few-shot segmentation prior maps and attention masking on synthetic
/// episodes.
#[derive(Debug, Parser)]
#[command(name = "fssk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write seeded synthetic episodes to disk.
    Gen(gen::GenArgs),
    /// Run the pipeline over episode directories and write a report.
    Run(run::RunArgs),
    /// Compare per-block mask ratios of the two masking strategies.
    MaskStats(mask_stats::MaskStatsArgs),
    /// Check every kernel against its brute-force reference.
    Oracle(oracle::OracleArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => gen::execute(args),
        Command::Run(args) => run::execute(args),
        Command::MaskStats(args) => mask_stats::execute(args),
        Command::Oracle(args) => oracle::execute(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
