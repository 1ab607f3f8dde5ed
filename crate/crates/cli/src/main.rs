use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skiprec::Error;

mod commands;
mod settings;

#[derive(Parser)]
#[command(name = "skiprec", version, about = "Skip-aware sequential recommendation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a listening log into a SKIPREC-DS/1 dataset.
    Ingest(commands::IngestFlags),
    /// Generate a synthetic dataset with planted skips.
    Synth(commands::SynthFlags),
    /// Train a sequential encoder.
    Train(commands::TrainFlags),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(commands::EvalFlags),
    /// Fit and evaluate a matrix factorization baseline.
    Baseline(commands::BaselineFlags),
    /// Relative change of metrics file B over metrics file A.
    Compare(commands::CompareFlags),
    /// Table of several metrics files relative to the first.
    Report(commands::ReportFlags),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Integrity(_) => 3,
        Error::Numeric { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(f) => commands::ingest(f),
        Command::Synth(f) => commands::synth(f),
        Command::Train(f) => commands::train(f),
        Command::Eval(f) => commands::eval(f),
        Command::Baseline(f) => commands::baseline(f),
        Command::Compare(f) => commands::compare(f),
        Command::Report(f) => commands::report(f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
