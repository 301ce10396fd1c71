//! Binary entry point: parses arguments, loads and validates the run
//! configuration, dispatches to a subcommand, and maps failures to
//! exit codes — 0 success, 1 usage or config error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gct_roundtrip_cli::commands;
use gct_roundtrip_cli::config::load_config;

#[derive(Parser)]
#[command(
    name = "gct-roundtrip",
    version,
    about = "Round-trip harness: synthetic graph -> cohort -> attention-prior transformer -> recovered graph"
)]
struct Cli {
    /// TOML run config; omit to use the built-in reference configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic knowledge graph, cohort, and conditional table.
    Generate,
    /// Train the configured loss mode on the generated cohort.
    Train,
    /// Recover a graph from a trained checkpoint's attention.
    Extract,
    /// Score recovered graphs in the run directory against the source graph.
    Evaluate,
    /// Run the whole pipeline, both loss modes, and the comparison.
    Roundtrip,
    /// Compare the two loss modes' report CSVs.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            // Help and version are successful outputs, not usage errors.
            return if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{err}");
                ExitCode::SUCCESS
            } else {
                eprint!("{err}");
                ExitCode::from(1)
            };
        }
    };
    let config = match load_config(cli.config.as_deref(), cli.seed, cli.out.as_deref()) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("{err}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Generate => commands::cmd_generate(&config),
        Command::Train => commands::cmd_train(&config),
        Command::Extract => commands::cmd_extract(&config),
        Command::Evaluate => commands::cmd_evaluate(&config),
        Command::Roundtrip => commands::cmd_roundtrip(&config),
        Command::Report => commands::cmd_report(&config),
    };
    match result {
        Ok(output) => {
            print!("{}", output.rendered());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
