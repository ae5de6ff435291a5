use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tyrist_core::model::PanMode;
use tyrist_core::LossKind;

/// Infrared small-target detector toolkit.
///
/// Config-file keys can also be given as flags (`--epochs 20`,
/// `--stem_stride 2`); flags override the file.
#[derive(Debug, Parser)]
#[command(name = "tyrist", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/val dataset.
    Synth(SynthArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally restricted to some heads.
    Eval(EvalArgs),
    /// Remove heads and PAN layers from a checkpoint.
    Trim(TrimArgs),
    /// Count FLOPs and parameters of a model.
    Flops(FlopsArgs),
    /// Tabulate a box similarity over centre offsets.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset config file (key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Dataset directory: either `train/` and `val/` subdirectories or a
    /// single `images/` + `labels/` pair.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds parameter init, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Second stage: re-draw attention and head weights, freeze the rest.
    #[arg(long)]
    pub stage2: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with `images/` and `labels/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only these heads, e.g. `P2` or `P2,P3`.
    #[arg(long)]
    pub heads: Option<String>,
    /// PAN mode used with `--heads`; defaults to the smallest valid mode.
    #[arg(long)]
    pub pan_mode: Option<PanMode>,
    #[arg(long, default_value_t = tyrist_core::detect::DEFAULT_CONF_THRESH)]
    pub conf: f64,
    #[arg(long, default_value_t = tyrist_core::eval::DEFAULT_MATCH_IOU)]
    pub iou: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct TrimArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Heads to keep, e.g. `P2`.
    #[arg(long)]
    pub keep_heads: String,
    #[arg(long, default_value = "identity")]
    pub pan_mode: PanMode,
    #[arg(long)]
    pub out: PathBuf,
    /// Square input side used for the FLOPs report.
    #[arg(long, default_value_t = 512)]
    pub input_size: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    pub model_config: Option<PathBuf>,
    /// Count a (possibly trimmed) checkpoint instead of a config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Second model config; its FLOPs divide the first model's in `ratio`.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub input_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// Ground-truth box `cx,cy,w,h`.
    #[arg(long)]
    pub gt: String,
    /// Offsets applied on both axes, e.g. `0,1,2,3`.
    #[arg(long, conflicts_with = "grid")]
    pub offsets: Option<String>,
    /// Offset range `start:stop:step` (inclusive stop).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value = "nwd")]
    pub kind: LossKind,
    #[arg(long)]
    pub out: PathBuf,
}
