//! Pipeline entry point: synthetic data generation, training, sampling,
//! evaluation, and archive inspection.
//!
//! Every command logs JSON objects, one per line, to stderr. Validation
//! failures exit with code 1 and a single `{"error": ...}` line; I/O
//! failures exit with code 2.

mod eval;
mod gen_data;
mod inspect;
mod manifest;
mod sample;
mod train;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use headturn::error::Error;

#[derive(Parser, Debug)]
#[command(
    name = "headturn",
    version,
    about = "Dyadic head motion pipeline: synthetic data, training, sampling, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dialogue dataset.
    GenData(gen_data::GenDataArgs),
    /// Train a model on a dataset.
    Train(train::TrainArgs),
    /// Generate agent head motion for a dataset split.
    Sample(sample::SampleArgs),
    /// Score generated motion against ground truth.
    Eval(eval::EvalArgs),
    /// Print an archive's manifest.
    Inspect(inspect::InspectArgs),
}

/// Clamps the worker count; strict mode forces a single-threaded run.
fn effective_workers(workers: usize, strict: bool) -> usize {
    if strict {
        1
    } else {
        workers.max(1)
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let reason = e.to_string();
            let line = reason.lines().next().unwrap_or("bad arguments");
            eprintln!("{}", serde_json::json!({ "error": line }));
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Sample(args) => sample::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Inspect(args) => inspect::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::from(exit_for(&e))
        }
    }
}
