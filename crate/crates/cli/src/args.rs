use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Image codec built on a conditional rectified-flow decoder.
///
/// Every flag except --config may also be set in the TOML file given by
/// --config, under the flag's name with `-` replaced by `_`. Flags win.
/// Exit codes: 0 success, 2 configuration error, 3 non-finite loss,
/// 4 malformed input file.
#[derive(Debug, Parser)]
#[command(name = "cod", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage of the progressive recipe.
    Train(TrainArgs),
    /// Compress a PNG into a .codb bitstream.
    Encode(EncodeArgs),
    /// Reconstruct a PNG from a .codb bitstream.
    Decode(DecodeArgs),
    /// One-step distillation or bitrate adaptation of a one-step model.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Sweep decoding steps, model width or bitrate.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of PNG training images.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use this many procedural images instead of --dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the procedural dataset [default: 0].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Output directory for the checkpoint and run log [default: $COD_CACHE_DIR or ./runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// low_res_pretrain, high_res_pretrain or unified_post_train [default: low_res_pretrain].
    #[arg(long)]
    pub stage: Option<String>,
    /// Checkpoint of the previous stage (required after the first stage).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Base image size of the recipe; later stages train at twice this [default: 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Transformer width [default: 64].
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of transformer blocks [default: 4].
    #[arg(long)]
    pub depth: Option<usize>,
    /// pixel or latent [default: pixel].
    #[arg(long)]
    pub space: Option<String>,
    /// v or x [default: v].
    #[arg(long)]
    pub prediction_target: Option<String>,
    /// Optimiser steps [default: 200].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Images per batch [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of the first stage; later stages use a fifth [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of samples with t in (0, 1); the rest use t = 0 [default: by stage].
    #[arg(long)]
    pub alpha_flow_fraction: Option<f64>,
    /// Weight of representation alignment [default: 0.5].
    #[arg(long)]
    pub lambda_repa: Option<f64>,
    /// Weight of the commitment loss [default: 0.25].
    #[arg(long)]
    pub beta_commit: Option<f64>,
    /// Weight of the auxiliary heads [default: 1.0].
    #[arg(long)]
    pub gamma_aux: Option<f64>,
    /// Probability of dropping the condition [default: 0.1].
    #[arg(long)]
    pub uncond_dropout_p: Option<f64>,
    /// Global gradient-norm clip, 0 disables [default: 1.0].
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Steps of latent-adapter fitting before training a latent model [default: 300].
    #[arg(long)]
    pub adapter_steps: Option<usize>,
    /// Seed for initialisation and batches [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model checkpoint (path, or name inside $COD_CACHE_DIR).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input PNG.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output .codb file.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Decoder noise seed stored in the stream [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Require the checkpoint to match this preset (cod-base, cod-64bit, cod-mid, cod-high).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model checkpoint (path, or name inside $COD_CACHE_DIR).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input .codb file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Sampling steps; 1 is the single-step decode [default: 25].
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler or second_order [default: second_order].
    #[arg(long)]
    pub solver: Option<String>,
    /// Guidance scale [default: 3.0 pixel, 1.25 latent].
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// distill, adapters or full [default: distill].
    #[arg(long)]
    pub stage: Option<String>,
    /// Starting model: the teacher for distill, the one-step model for adapters,
    /// the adapter-stage model for full.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Multi-step model providing the real score (full stage only).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Target preset of the adapters stage [default: cod-mid].
    #[arg(long)]
    pub preset: Option<String>,
    /// Rank of the low-rank adapters [default: 32].
    #[arg(long)]
    pub rank: Option<usize>,
    /// Directory of PNG training images.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use this many procedural images instead of --dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the procedural dataset [default: 0].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Output directory [default: $COD_CACHE_DIR or ./runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimiser steps, counting critic steps [default: 100].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Images per batch [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Generator learning rate [default: 1e-5; full stage: a tenth of adapters].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fake-score and discriminator learning rate [default: 1e-5].
    #[arg(long)]
    pub critic_lr: Option<f64>,
    /// Updates per cycle, one of which trains the generator [default: 10].
    #[arg(long)]
    pub ratio: Option<usize>,
    /// Weight of the L1 reconstruction term [default: 1].
    #[arg(long)]
    pub l1_weight: Option<f64>,
    /// Weight of the feature-distance term [default: 1].
    #[arg(long)]
    pub feature_weight: Option<f64>,
    /// Weight of distribution matching [default: 2].
    #[arg(long)]
    pub dmd_weight: Option<f64>,
    /// Weight of the adversarial term [default: 0.01].
    #[arg(long)]
    pub gan_weight: Option<f64>,
    /// Weight of representation alignment [default: 0.5].
    #[arg(long)]
    pub repa_weight: Option<f64>,
    /// Weight of the commitment loss [default: 0.25].
    #[arg(long)]
    pub commit_weight: Option<f64>,
    /// Guidance scale of the real score [default: 1].
    #[arg(long)]
    pub real_cfg_scale: Option<f64>,
    /// mean_abs or score [default: mean_abs].
    #[arg(long)]
    pub weighting: Option<String>,
    /// Lower end of the distribution-matching time range [default: 0.02].
    #[arg(long)]
    pub t_min: Option<f64>,
    /// Upper end of the distribution-matching time range [default: 0.98].
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Global gradient-norm clip, 0 disables [default: 1.0].
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Model checkpoint (path, or name inside $COD_CACHE_DIR).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of PNG evaluation images.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use this many procedural images instead of --dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the procedural dataset [default: 1].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Root of the run directory [default: $COD_CACHE_DIR or ./runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling steps [default: 25].
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler or second_order [default: second_order].
    #[arg(long)]
    pub solver: Option<String>,
    /// Guidance scale [default: 3.0 pixel, 1.25 latent].
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// First stream seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// steps, width or bpp.
    #[arg(long)]
    pub axis: Option<String>,
    /// Step counts (steps axis) or widths (width axis), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Checkpoints to compare (bpp axis), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<PathBuf>>,
    /// Model checkpoint (steps axis).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory of PNG images, used for training (width axis) and evaluation.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Use this many procedural images instead of --dataset.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the procedural dataset [default: 0].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Images held out for evaluation (width axis) [default: 8].
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Root of the run directory [default: $COD_CACHE_DIR or ./runs].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling steps for evaluation on the width and bpp axes [default: 25].
    #[arg(long)]
    pub steps: Option<usize>,
    /// euler or second_order [default: second_order].
    #[arg(long)]
    pub solver: Option<String>,
    /// Guidance scale [default: 3.0 pixel, 1.25 latent].
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Training steps per width (width axis) [default: 200].
    #[arg(long)]
    pub train_steps: Option<usize>,
    /// Training batch size (width axis) [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training learning rate (width axis) [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Image size of the trained models (width axis) [default: 32].
    #[arg(long)]
    pub size: Option<usize>,
    /// Seed for training and stream seeds [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}
