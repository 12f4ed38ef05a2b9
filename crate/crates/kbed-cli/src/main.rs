//! Command-line harness for the sequential acquisition simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort,
//! 1 anything else. Thread count follows RAYON_NUM_THREADS.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Other(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical abort: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<kbed::Error> for CliError {
    fn from(e: kbed::Error) -> Self {
        match e {
            kbed::Error::Numerical(m) => CliError::Numerical(m),
            kbed::Error::InvalidParameter(m) => CliError::Config(m),
            kbed::Error::MalformedFile { .. } => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "kbed",
    about = "Sequential k-space acquisition simulator: adaptive subsampling with diffusion posteriors",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of reverse-diffusion / optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the posterior particle count.
    #[arg(long)]
    particles: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> commands::Overrides {
        commands::Overrides {
            seed: self.seed,
            out: self.out.clone(),
            steps: self.steps,
            particles: self.particles,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one sequential acquisition schedule and write all artifacts.
    Run(CommonArgs),
    /// Run the budget sweep and aggregate medians per acceleration factor.
    Sweep(CommonArgs),
    /// Paired optimized-vs-random runs over shared seeds.
    CompareRandom(CommonArgs),
    /// Fit a denoiser prior on synthetic phantoms and save it.
    TrainPrior(CommonArgs),
    /// Compare two PGM images (plus optional segmentations).
    EvalMetrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference_seg: Option<PathBuf>,
        #[arg(long)]
        estimate_seg: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => commands::run_experiment(&a.config, &a.overrides()),
        Command::Sweep(a) => commands::sweep_acceleration(&a.config, &a.overrides()),
        Command::CompareRandom(a) => commands::compare_random(&a.config, &a.overrides()),
        Command::TrainPrior(a) => commands::train_prior(&a.config, &a.overrides()),
        Command::EvalMetrics {
            reference,
            estimate,
            reference_seg,
            estimate_seg,
        } => commands::eval_metrics(
            reference,
            estimate,
            reference_seg.as_deref(),
            estimate_seg.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Numerical(_) => ExitCode::from(3),
                CliError::Other(_) => ExitCode::from(1),
            }
        }
    }
}
