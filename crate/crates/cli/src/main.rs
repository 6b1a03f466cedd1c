use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chaoslab_cli::Experiment;

#[derive(Parser)]
#[command(name = "chaoslab", version, about = "Propagation-of-chaos experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy rates of the exactly solvable linear model.
    OracleRates { config: PathBuf },
    /// Moment bounds and comparison-lemma certification for the hierarchy.
    HierarchyCertify { config: PathBuf },
    /// Monte Carlo coupling, weak-chaos and remainder scaling.
    ChaosMc { config: PathBuf },
    /// Tangent and measure-derivative flows, and monotonicity.
    FlowsCheck { config: PathBuf },
    /// Empirical-measure quantization error in d = 3.
    QuantizationDemo { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, path) = match cli.command {
        Command::OracleRates { config } => (Experiment::OracleRates, config),
        Command::HierarchyCertify { config } => (Experiment::HierarchyCertify, config),
        Command::ChaosMc { config } => (Experiment::ChaosMc, config),
        Command::FlowsCheck { config } => (Experiment::FlowsCheck, config),
        Command::QuantizationDemo { config } => (Experiment::QuantizationDemo, config),
    };
    let (outcome, dir) = match chaoslab_cli::run(experiment, &path) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    for c in &outcome.checks {
        println!("{c}");
    }
    for n in &outcome.notices {
        println!("NOTE {n}");
    }
    println!("outputs written to {}", dir.display());
    let failures = outcome.failures();
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{} of {} checks failed:", failures.len(), outcome.checks.len());
    for f in failures {
        eprintln!("  {f}");
    }
    ExitCode::from(1)
}
