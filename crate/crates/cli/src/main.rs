use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod settings;

use commands::{AblateArgs, AnalyzeArgs, EvaluateArgs, SweepArgs, SynthArgs, TrainArgs};

/// Exit codes beyond clap's own usage code 2.
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

/// A problem with how the tool was invoked rather than with the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "pesd", version, about = "Long-horizon forecasting with periodic gating and structured decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on one data segment.
    Evaluate(EvaluateArgs),
    /// Train the full model and each ablated variant with shared seeds.
    Ablate(AblateArgs),
    /// Train once per value of a regularization or gating weight.
    Sweep(SweepArgs),
    /// Export spectral, topology, latent and gate diagnostics.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset with planted structure.
    Synth(SynthArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<pesd::Error>() {
        Some(pesd::Error::Diverged { .. } | pesd::Error::Numeric { .. }) => EXIT_DIVERGED,
        Some(pesd::Error::Config(_) | pesd::Error::Shape { .. }) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
