mod artifacts;
mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use peerassign::assign::FitnessKind;

use crate::config::{Overrides, PipelineConfig};
use crate::error::CliResult;
use crate::stages::Ctx;

/// Friendship prediction, peer-effect estimation and classroom assignment.
#[derive(Debug, Parser)]
#[command(name = "peerassign", version)]
struct Cli {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; stage seeds not pinned in the config derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fitness {
    Ga,
    Afga,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and its ground truth.
    Synth,
    /// Fit the friendship model on the training classrooms.
    Train,
    /// Predict Ω for every classroom and replay the survey.
    Predict,
    /// Estimate the peer effect on the training classrooms.
    Estimate,
    /// Search for a two-classroom split of one school.
    Assign {
        /// Fitness used for the recommended policy.
        #[arg(long, value_enum)]
        fitness: Option<Fitness>,
        #[arg(long)]
        phi: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        swaps: Option<usize>,
        #[arg(long)]
        mut_prob: Option<f64>,
    },
    /// Consolidate the stage outputs into one summary.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        ..Overrides::default()
    };
    if let Command::Assign {
        fitness,
        phi,
        rho,
        iters,
        swaps,
        mut_prob,
    } = &cli.command
    {
        overrides.fitness = fitness.map(|f| match f {
            Fitness::Ga => FitnessKind::Ga,
            Fitness::Afga => FitnessKind::Afga,
        });
        overrides.phi = *phi;
        overrides.rho = *rho;
        overrides.iters = *iters;
        overrides.swaps = *swaps;
        overrides.mut_prob = *mut_prob;
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Ctx::new(cfg)?;
    match cli.command {
        Command::Synth => stages::synth(&ctx),
        Command::Train => stages::train(&ctx),
        Command::Predict => stages::predict(&ctx),
        Command::Estimate => stages::estimate(&ctx),
        Command::Assign { .. } => stages::assign(&ctx),
        Command::Report => stages::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
