use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gfdt::experiment::{Experiment, ExperimentConfig, Stage};
use log::{error, info};

/// Score-based linear response experiments.
#[derive(Parser)]
#[command(name = "gfdt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the unperturbed model and store the trajectory.
    Simulate(RunArgs),
    /// Estimate the score (and Gaussian baseline) from stored data.
    FitScore(RunArgs),
    /// Predict responses from the fitted scores.
    Respond(RunArgs),
    /// Measure responses with perturbed ensembles.
    Truth(RunArgs),
    /// Reconstruct perturbed densities from moment responses.
    Maxent(RunArgs),
    /// Compare every response against the reference.
    Report(RunArgs),
    /// Run every applicable stage.
    All(RunArgs),
    /// Write a preset config to a file.
    Init {
        /// scalar, triad, barotropic or navier-stokes
        preset: String,
        path: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in config by name.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of score-training samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Train on the reduced sample count.
    #[arg(long)]
    reduced_data: bool,
}

impl RunArgs {
    fn config(&self) -> gfdt::Result<ExperimentConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => unreachable!("clap requires one of them"),
        };
        if let Some(seed) = self.seed {
            c = c.with_seed(seed);
        }
        if let Some(n) = self.samples {
            c.score.samples = n;
        }
        c.reduced_data |= self.reduced_data;
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
    Other(anyhow::Error),
}

fn classify(e: gfdt::Error) -> Failure {
    if e.is_numerical() {
        Failure::Numerical(e.into())
    } else {
        Failure::Other(e.into())
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let (args, stage) = match command {
        Command::Init { preset, path } => {
            let c = ExperimentConfig::preset(&preset).map_err(|e| Failure::Config(e.into()))?;
            return c
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(Failure::Other);
        }
        Command::Simulate(a) => (a, Some(Stage::Simulate)),
        Command::FitScore(a) => (a, Some(Stage::FitScore)),
        Command::Respond(a) => (a, Some(Stage::Respond)),
        Command::Truth(a) => (a, Some(Stage::Truth)),
        Command::Maxent(a) => (a, Some(Stage::Maxent)),
        Command::Report(a) => (a, Some(Stage::Report)),
        Command::All(a) => (a, None),
    };
    let config = args.config().map_err(|e| Failure::Config(e.into()))?;
    let mut exp = Experiment::open(config, &args.out).map_err(|e| Failure::Config(e.into()))?;
    match stage {
        Some(s) => exp.run_stage(s).map_err(classify)?,
        None => exp.run_all().map_err(classify)?,
    }
    info!("manifest written to {}", args.out.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("configuration: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            error!("numerical failure: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
