mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wait_core::error::ErrorClass;

#[derive(Parser, Debug)]
#[command(name = "wait", version, about = "Feature-warping unpaired video translation")]
pub struct Cli {
    /// Variant configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Overwrite outputs of an earlier run instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Lay out a dataset root from frame directories and image folders.
    Prepare(PrepareArgs),
    /// Train the configured variant.
    Train(TrainArgs),
    /// Translate a directory of frames with a checkpoint.
    Stylize(StylizeArgs),
    /// Score a checkpoint on a test split: FID, FWE and temporal MSE.
    Evaluate(EvaluateArgs),
    /// Write one configuration per ablation setting, optionally training each.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Source clips: a frame directory, or a directory of clips.
    #[arg(long)]
    pub source: PathBuf,
    /// Target images.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub test_source: Option<PathBuf>,
    #[arg(long)]
    pub test_target: Option<PathBuf>,
    /// Keep every n-th source frame.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Store the target as ordered clips (video targets).
    #[arg(long)]
    pub target_ordered: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Continue from the run's latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of frames, ordered by their trailing frame number.
    #[arg(long)]
    pub frames: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint path, or `identity` for pass-through translation.
    #[arg(long)]
    pub checkpoint: String,
    /// Working resolution of the identity translator.
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    /// Prepared dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "testA")]
    pub split: String,
    #[arg(long, default_value = "testB")]
    pub target_split: String,
    /// Directory of `<from>__<to>.flo` files.
    #[arg(long)]
    pub flows: PathBuf,
    #[arg(long, default_value = "pooled-pixels")]
    pub extractor: String,
    /// Precomputed target statistics; replaces the target split.
    #[arg(long)]
    pub real_stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Axis values (TOML); defaults to the full study.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// Train every planned run in `<out>/<name>`.
    #[arg(long)]
    pub train: bool,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
