use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "lbgan", version, about = "Multi-view face synthesis with a normalizer and an editor GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic multi-view dataset (13 yaw bins per identity).
    SynthData(SynthArgs),
    /// Train one variant, writing checkpoints/ and logs/train.jsonl.
    Train(TrainArgs),
    /// Rotate one image to a target yaw.
    Rotate(RotateArgs),
    /// Pose sweep: the input followed by one rotation per target.
    Grid(GridArgs),
    /// Identity interpolation between two images.
    Morph(MorphArgs),
    /// Identification, pose-control and pose-error reports for a checkpoint.
    Eval(EvalArgs),
    /// Evaluate (and optionally train) all three variants and compare them.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthArgs {
    /// TOML file with defaults for any option below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    /// train or test; the splits draw identities from disjoint streams.
    #[arg(long)]
    pub split: Option<String>,
}

/// Every training constant, each optional over the profile defaults.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainOverrides {
    /// desk (32 px, 2000/4000 iterations) or paper (96 px).
    #[arg(long)]
    pub profile: Option<String>,
    /// full, single_stage or no_regularizers.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Generator iterations per discriminator iteration in stage 2.
    #[arg(long)]
    pub g_steps: Option<u64>,
    #[arg(long)]
    pub stage1_iters: Option<u64>,
    #[arg(long)]
    pub stage2_iters: Option<u64>,
    /// Stage-2 learning-rate multiplier for the normalizer and its discriminator.
    #[arg(long)]
    pub gn_lr_factor: Option<f64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    #[arg(long)]
    pub lambda_csc: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub bottleneck_dim: Option<usize>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Save checkpoints/latest every N iterations (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from the most advanced checkpoint under --out.
    #[arg(long)]
    #[serde(skip)]
    pub resume: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub hp: TrainOverrides,
}

/// Where the input image comes from.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct InputArgs {
    /// Checkpoint directory (holding manifest.json).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input PNG.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON landmarks {left_eye, right_eye, mouth} as [row, col]; when given
    /// the input is aligned before synthesis.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Dataset directory, to pick the input by --record instead of --input.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub record: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct RotateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Target yaw in [-90, 90]; off-grid values blend the two nearest codes.
    #[arg(long, allow_hyphen_values = true)]
    pub deg: Option<f64>,
    #[arg(long)]
    pub prefix: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// `all` for the 13 grid poses, or a comma-separated list of degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub degs: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct MorphArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Second image.
    #[arg(long)]
    pub input2: Option<PathBuf>,
    #[arg(long)]
    pub landmarks2: Option<PathBuf>,
    #[arg(long)]
    pub record2: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Yaw of the decoded interpolants (default frontal).
    #[arg(long, allow_hyphen_values = true)]
    pub deg: Option<f64>,
    #[arg(long)]
    pub name: Option<String>,
}

/// Auxiliary-model settings for the measurement harness.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalOverrides {
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Training iterations for the embedder and pose models.
    #[arg(long)]
    pub eval_iters: Option<u64>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalOverrides,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Root holding one run directory per variant (`<out>/<variant>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train variants whose final checkpoint is missing instead of failing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub train_missing: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    pub eval: EvalOverrides,
    #[command(flatten)]
    #[serde(flatten)]
    pub hp: TrainOverrides,
}
