//! `kinemod`: self-supervised skeleton representation pipeline.
//!
//! Subcommands cover the full protocol: synthesize a dataset, derive the six
//! modality streams, pretrain with the two-stage contrastive schedule,
//! distill a compact student, evaluate with linear probes, and verify every
//! loss gradient against finite differences.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use kinemod::error::Result;

#[derive(Parser)]
#[command(
    name = "kinemod",
    version,
    about = "Multi-modality self-supervised skeleton representation pipeline"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override every stage seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Threads for data-parallel phases (file parsing, derivation).
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    workers: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Field override, repeatable: section.key=value.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured dataset and its manifest.
    Generate,
    /// Derive all six modality streams per sample, with summary statistics.
    Derive,
    /// Two-stage self-supervised pretraining.
    Pretrain,
    /// Distill a frozen teacher checkpoint into a student.
    Distill,
    /// Linear-probe evaluation with score fusion and retrieval precision.
    Eval,
    /// Verify all loss gradients against finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = cli.out {
        config.paths.out_dir = Some(out);
    }
    let config = config.resolve();
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Generate => commands::cmd_generate(&config),
        Command::Derive => commands::cmd_derive(&config, workers),
        Command::Pretrain => commands::cmd_pretrain(&config, workers),
        Command::Distill => commands::cmd_distill(&config, workers),
        Command::Eval => commands::cmd_eval(&config, workers),
        Command::Gradcheck => commands::cmd_gradcheck(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KINEMOD_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
