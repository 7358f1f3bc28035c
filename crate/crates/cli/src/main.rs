//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or validation failure, 3 missing
//! upstream artifact, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msae::{commands, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "msae", version, about = "Manifold-regularized sparse autoencoder pipeline")]
struct Cli {
    /// TOML experiment configuration. Without it, a built-in synthetic
    /// reference experiment is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the graph build; never changes output bytes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted ground truth.
    Synth,
    /// Build the k-NN manifold graph over the training split.
    Graph,
    /// Train the sparse autoencoder and write a checkpoint.
    Train,
    /// Annotate alive features with deconfounded clinical correlations.
    Annotate,
    /// Run the selective-prediction harness (and optional ablation grid).
    Evaluate,
    /// Apply the frozen model to a second cohort and measure replication.
    Replicate,
    /// Geometric diagnostics of the embedding matrix.
    Diagnose,
    /// Consolidate existing reports into one summary.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Graph => "graph",
            Command::Train => "train",
            Command::Annotate => "annotate",
            Command::Evaluate => "evaluate",
            Command::Replicate => "replicate",
            Command::Diagnose => "diagnose",
            Command::Report => "report",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_with(
            cli.seed.unwrap_or(42),
            cli.out.clone().unwrap_or_else(|| PathBuf::from("msae-out")),
        ),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        if let Some(spec) = config.synth.as_mut() {
            spec.seed = seed;
        }
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        config.threads = threads;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run_command(cli.command.name(), &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
