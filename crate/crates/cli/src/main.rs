mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "strataseg", version, about = "Segmentation and misclassification detection for layered particles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = "STRATASEG_ARTIFACTS", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train the segmentation model on one stage's data.
    TrainSeg(TrainSegArgs),
    /// Train the meta-model on a frozen segmentation checkpoint.
    TrainMeta(TrainMetaArgs),
    /// Run (or resume) every stage from a config file.
    Pipeline(PipelineArgs),
    /// Write segmentation and detection reports for a dataset split.
    Eval(EvalArgs),
    /// Render masks, overlays, uncertainty and error maps.
    Predict(PredictArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Full,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// agr2like or agr567like.
    #[arg(long)]
    pub profile: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    pub canvas: usize,
    /// Put every sample in the training split.
    #[arg(long)]
    pub train_only: bool,
    /// Disable scratches, occlusions and other defects.
    #[arg(long)]
    pub no_defects: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    /// 2 (related-domain pretraining) or 3 (target fine-tuning).
    #[arg(long, default_value = "3")]
    pub stage: String,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Segmentation or backbone checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub model: Preset,
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct TrainMetaArgs {
    #[arg(long, required = true)]
    pub seg_checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Tiny)]
    pub model: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Stop after this stage (1, 2, 3 or meta); rerun to resume.
    #[arg(long)]
    pub stop_after: Option<String>,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub seg_checkpoint: PathBuf,
    #[arg(long)]
    pub meta_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Detection threshold; calibrated on the validation split when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub seg_checkpoint: PathBuf,
    #[arg(long)]
    pub meta_checkpoint: Option<PathBuf>,
    /// Directory of ground-truth masks named like the inputs.
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    /// Predict every sample of a manifest split (with ground truth).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, requires = "manifest")]
    pub split: SplitArg,
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::TrainMeta(a) => commands::train_meta(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
