mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtrattunet::Error;

/// Exit status 1: the command failed while running.
const RUNTIME: u8 = 1;
/// Exit status 2: bad configuration or input.
const INPUT: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: INPUT,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Validation(_) | Error::Data { .. } | Error::Checkpoint(_) => INPUT,
            _ => RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dtrattunet",
    version,
    about = "Train and apply dual-decoder transformer/CNN segmentation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and report test metrics as mean ± std.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Write predicted label maps for images.
    Predict(PredictArgs),
    /// Write colour overlays of predictions on images.
    Overlay(OverlayArgs),
    /// Aggregate the per-run test metrics found under a training directory.
    Summarize(SummarizeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run configuration with dotted keys such as `train.epochs = 60`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Architecture variant: unet, attunet, d-unet, trunet, d-trunet, d-attunet, trattunet, d-trattunet.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Option<Vec<u64>>,
    /// Single run with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Validate the configuration and print the layer manifest without
    /// reading data or writing files.
    #[arg(long)]
    dry_run: bool,
    /// Also write per-image confusion counts and Dice.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration whose model must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load the checkpoint even if its config hash differs from the request.
    #[arg(long)]
    allow_config_mismatch: bool,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Dataset root in the images / infection_masks / lung_masks layout.
    #[arg(long)]
    data: PathBuf,
    /// Task the caller expects; a checkpoint for the other task is refused.
    #[arg(long)]
    task: Option<String>,
    /// Output directory (default: `<output root>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_image: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    checkpoint: CheckpointArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Image files (.png, .nii, .nii.gz) or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[command(flatten)]
    predict: PredictArgs,
    /// Skip the lung contour even when the model predicts lungs.
    #[arg(long)]
    no_lung_contour: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    /// Training output directory holding `run_<seed>/test_metrics.json`.
    dir: PathBuf,
    /// Where to write the summary files (default: `dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_image: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a, None),
        Command::Overlay(a) => commands::predict(a.predict, Some(!a.no_lung_contour)),
        Command::Summarize(a) => commands::summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
