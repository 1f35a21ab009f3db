mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhmtl_core::data::DataError;
use mhmtl_core::train::{CheckpointError, EvalError, TrainError};
use mhmtl_core::{ConfigError, ModelError};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "mhmtl", version, about = "Multi-head multi-task learning for ultrasound-style images")]
struct Cli {
    /// Caps worker threads for data generation and conv kernels.
    #[arg(long, env = "MHMTL_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset from the `[data.synth]` section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; the training manifest goes to its root and the
        /// validation split to `val/`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and the metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest and write `eval_report.txt`.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Refuse the checkpoint unless it was trained with this config's model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Predict one image; writes `prediction.json` (and `mask.png` for
    /// segmentation).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        subtask: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config: {0}")]
    Toml(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) | ModelError::UnknownSubtask(_) => 2,
        _ => 1,
    }
}

impl CliError {
    /// 2 config, 3 data, 4 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Toml(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Model(e) => model_code(e),
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::NoSamples => 2,
                TrainError::Data(_) => 3,
                TrainError::Checkpoint(_) | TrainError::Resume(_) => 4,
                TrainError::Model(e) => model_code(e),
                _ => 1,
            },
            CliError::Eval(e) => match e {
                EvalError::Data(_) | EvalError::Empty => 3,
                EvalError::Model(e) => model_code(e),
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}

fn configure_threads(threads: Option<usize>, deterministic: bool) {
    let n = if deterministic { Some(1) } else { threads };
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = config::RunConfig::load(&config)?;
            configure_threads(cli.threads, cfg.deterministic);
            commands::gen_data(&cfg, &out, seed)
        }
        Command::Train { config, resume, out } => {
            let cfg = config::RunConfig::load(&config)?;
            configure_threads(cli.threads, cfg.deterministic);
            commands::train(&cfg, resume.as_deref(), out.as_deref())
        }
        Command::Eval {
            checkpoint,
            manifest,
            config,
            oracle,
            out,
        } => {
            configure_threads(cli.threads, false);
            let cfg = config.as_deref().map(config::RunConfig::load).transpose()?;
            let checkpoint = if oracle { None } else { checkpoint };
            commands::eval(checkpoint.as_deref(), &manifest, cfg.as_ref(), &out)
        }
        Command::Predict {
            checkpoint,
            image,
            subtask,
            config,
            out,
        } => {
            configure_threads(cli.threads, false);
            let cfg = config.as_deref().map(config::RunConfig::load).transpose()?;
            commands::predict(&checkpoint, &image, &subtask, cfg.as_ref(), &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
