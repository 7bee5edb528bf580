//! `mcdm`: command-line driver for mask generation, training, inpainting
//! augmentation and evaluation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcdm::Exec;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mcdm",
    version,
    about = "Mask-conditioned diffusion augmentation pipeline"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Dotted override applied after the config file, e.g. `schedule.T=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Overrides `global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run batch loops on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate random free-form masks with coverage statistics.
    GenMasks {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Train the denoiser on the real training entries of the manifest.
    Train,
    /// Inpaint masked regions of one image, or of every real manifest entry.
    Sample {
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Extend a manifest with inpainted fakes of its real training images.
    Augment,
    /// Frechet distance between the features of two image sets.
    EvalFid {
        /// Directory of PNGs or a JSONL manifest.
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
    },
    /// ROC AUC from a `score,label` CSV.
    EvalAuc {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Write the noise schedule as CSV.
    InspectSchedule,
    /// Write a procedural toy dataset and its manifest.
    MakeToy {
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = config::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match &cli.command {
        Command::GenMasks { count } => commands::gen_masks(&cfg, *count, exec),
        Command::Train => commands::train(&cfg, exec),
        Command::Sample { input } => commands::sample(&cfg, input.as_deref(), exec),
        Command::Augment => commands::augment(&cfg, exec),
        Command::EvalFid { real, fake } => commands::eval_fid(&cfg, real, fake, exec),
        Command::EvalAuc { scores } => commands::eval_auc(&cfg, scores),
        Command::InspectSchedule => commands::inspect_schedule(&cfg),
        Command::MakeToy { count } => commands::make_toy(&cfg, *count),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
