//! `voxseg` — the pipeline as subcommands over the JSON+raw containers.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage/input error.

mod commands;
mod dataset;
mod manifest;
mod patch_store;
mod svg;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "voxseg", version, about = "Attention-based 3D lesion segmentation pipeline")]
struct Cli {
    /// Worker threads for per-subject stages (preprocess, predict,
    /// evaluate). Values above 1 do not change any output bytes: subjects
    /// are independent. Also settable via VOXSEG_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic lesion dataset.
    Synth(SynthArgs),
    /// Build 2-channel (enhanced + edges) inputs from raw volumes.
    Preprocess(PreprocessArgs),
    /// Draw training/validation patches into a patch archive.
    Sample(SampleArgs),
    /// Train the network on a patch archive.
    Train(TrainArgs),
    /// Tiled inference over preprocessed subjects.
    Predict(PredictArgs),
    /// Lesion-wise evaluation of predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Render CSV artifacts as SVG plots.
    #[command(subcommand)]
    Plot(PlotCommand),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    subjects: usize,
    /// Cubic extent, or three comma-separated extents (D,H,W).
    #[arg(long, default_value = "48")]
    dims: String,
    #[arg(long, default_value_t = 3)]
    lesions: usize,
    #[arg(long, default_value_t = 3.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 6.0)]
    radius_max: f64,
    /// Intensity multiplier inside lesions.
    #[arg(long, default_value_t = 2.0)]
    intensity: f64,
    /// Uniform fine-noise amplitude added to the background.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    clip_limit: f64,
    /// CLAHE tile count per in-slice axis.
    #[arg(long, default_value_t = 8)]
    tiles: usize,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Output archive base path (writes <out>.json + <out>.raw).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    /// Total training patches, split across the training subjects.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Validation patches, drawn from the validation subject.
    #[arg(long, default_value_t = 40)]
    val_count: usize,
    #[arg(long, default_value_t = 0.6)]
    lesion_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Patch archive base path.
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Architecture preset: `toy` runs on a desk, `paper` is full-width.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Training epochs; defaults to 30 for the toy preset, 100 for paper.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.97)]
    decay: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long, default_value_t = 0.3)]
    beta: f64,
    #[arg(long, default_value_t = 4.0 / 3.0)]
    gamma: f64,
    /// Loss: `focal` (focal Tversky) or `tversky`.
    #[arg(long, default_value = "focal")]
    loss: String,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    input: PathBuf,
    /// Checkpoint base path (reads <checkpoint>.json + <checkpoint>.raw).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
pub enum PlotCommand {
    /// Training/validation loss curves with the best epoch marked.
    Loss(PlotArgs),
    /// Lesion-volume agreement scatter with identity and fitted lines.
    Volumes(PlotArgs),
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped onto the exit-code contract.
pub enum CliError {
    /// Bad flags or missing inputs (exit 2).
    Usage(String),
    /// The pipeline itself failed (exit 1).
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<voxseg::Error> for CliError {
    fn from(e: voxseg::Error) -> Self {
        CliError::Pipeline(anyhow::Error::new(e))
    }
}

pub fn usage_error(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("VOXSEG_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1);
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Preprocess(args) => commands::preprocess(&args, threads),
        Command::Sample(args) => commands::sample(&args),
        Command::Train(args) => commands::train(&args),
        Command::Predict(args) => commands::predict(&args, threads),
        Command::Evaluate(args) => commands::evaluate(&args, threads),
        Command::Plot(PlotCommand::Loss(args)) => commands::plot_loss(&args),
        Command::Plot(PlotCommand::Volumes(args)) => commands::plot_volumes(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Pipeline(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
