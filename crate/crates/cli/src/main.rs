//! `evop`: generate trajectories, train encoders, and analyse the learned
//! evolution operator from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, FinalizeSource, ModelChoice, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "evop", version, about = "Learn and analyse evolution operators of dynamical systems")]
struct Cli {
    /// TOML run configuration (sections: dynamics, pairs, encoder, training, operator, spectral, interpret).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in base configuration the config file is merged over.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "evop-out")]
    out: PathBuf,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "EVOP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a trajectory and write it with its train/val/test splits.
    Generate,
    /// Train the encoder and predictor, then write the operator.
    Train(TrainArgs),
    /// One-step forecast RMSE and VAMP-2 on held-out data.
    Evaluate(EvaluateArgs),
    /// Spectrum table and eigenfunction time series.
    Spectrum(SpectrumArgs),
    /// LASSO regression of an eigenfunction onto descriptors.
    Interpret(InterpretArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory written by `generate` (holds manifest.json and the splits).
    #[arg(long)]
    data: PathBuf,

    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Covariances used for the final operator.
    #[arg(long, value_enum)]
    source: Option<FinalizeSource>,

    /// Model the operator is built from.
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Operator file written by `train`.
    #[arg(long)]
    operator: PathBuf,

    /// Checkpoint holding the encoder the operator was built on.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Trajectory file to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Training trajectory for fitting the linear least-squares baseline.
    #[arg(long)]
    baseline_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Drop modes decorrelating faster than this (time units of the data).
    #[arg(long)]
    min_decorrelation: Option<f64>,

    /// Number of leading modes to export eigenfunctions for.
    #[arg(long)]
    n_modes: Option<usize>,
}

#[derive(Debug, Args)]
struct InterpretArgs {
    /// Eigenfunction CSV (`time_index,re,im`) written by `spectrum`.
    #[arg(long)]
    eigenfunction: PathBuf,

    /// Trajectory the descriptors are computed from.
    #[arg(long)]
    data: PathBuf,

    /// Report coefficients at this λ instead of the automatic choice.
    #[arg(long)]
    lambda: Option<f64>,

    /// Regress the modulus instead of the real part.
    #[arg(long)]
    modulus: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<ConfigError>() || matches!(e.downcast_ref::<evop_core::Error>(), Some(evop_core::Error::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?.with_seed(cli.seed);
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Generate => commands::generate(&cfg, &cli.out),
        Command::Train(a) => {
            let mut cfg = cfg;
            if let Some(s) = a.source {
                cfg.operator.source = s;
            }
            if let Some(m) = a.model {
                cfg.operator.model = m;
            }
            commands::train(&cfg, &a.data, a.resume.as_deref(), &cli.out)
        }
        Command::Evaluate(a) => commands::evaluate(
            &cfg,
            &a.model.operator,
            &a.model.checkpoint,
            &a.model.data,
            a.baseline_data.as_deref(),
            &cli.out,
        ),
        Command::Spectrum(a) => {
            let mut spectral = cfg.spectral.clone();
            if let Some(m) = a.min_decorrelation {
                if m < 0.0 {
                    return Err(ConfigError("--min-decorrelation must be >= 0".into()).into());
                }
                spectral.min_decorrelation = m;
            }
            if a.n_modes.is_some() {
                spectral.n_modes = a.n_modes;
            }
            commands::spectrum(&spectral, &a.model.operator, &a.model.checkpoint, &a.model.data, &cli.out)
        }
        Command::Interpret(a) => {
            let mut interp = cfg.interpret.clone();
            if a.lambda.is_some() {
                interp.lambda = a.lambda;
            }
            interp.modulus |= a.modulus;
            commands::interpret(&interp, &a.eigenfunction, &a.data, &cli.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
