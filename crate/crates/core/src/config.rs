//! Codec and model configuration.
//!
//! [`CodecConfig`] fixes the bit budget (resolution, downsample factor,
//! codebook size) and the denoiser shape. [`ModelConfig`] adds the
//! architecture knobs of the conditioner and the denoiser that do not
//! affect the transmitted payload.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Resolution of the denoiser token grid relative to the image.
pub const TOKEN_STRIDE: usize = 16;

/// Spatial stride of latents produced by the latent adapter.
pub const LATENT_STRIDE: usize = 8;

pub const SUPPORTED_DOWNSAMPLE: [usize; 4] = [8, 16, 32, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Pixel,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionTarget {
    /// Velocity prediction, `v = x - eps`.
    #[serde(alias = "v")]
    V,
    /// Clean-sample prediction, converted to velocity with a clamped denominator.
    #[serde(alias = "x")]
    X,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    pub downsample_factor: usize,
    pub codebook_size: usize,
    pub space: Space,
    pub prediction_target: PredictionTarget,
    pub channel_width: usize,
    pub depth: usize,
}

impl CodecConfig {
    pub fn new(
        height: usize,
        width: usize,
        downsample_factor: usize,
        codebook_size: usize,
    ) -> Self {
        Self {
            height,
            width,
            downsample_factor,
            codebook_size,
            space: Space::Pixel,
            prediction_target: PredictionTarget::V,
            channel_width: 64,
            depth: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if !SUPPORTED_DOWNSAMPLE.contains(&f) {
            return config_err(format!(
                "downsample factor {f} not in {SUPPORTED_DOWNSAMPLE:?}"
            ));
        }
        if self.height == 0 || self.width == 0 {
            return config_err("image dimensions must be positive");
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v % f != 0 {
                return config_err(format!("{name} {v} not divisible by downsample factor {f}"));
            }
            if v % TOKEN_STRIDE != 0 {
                return config_err(format!("{name} {v} not divisible by {TOKEN_STRIDE}"));
            }
        }
        if self.codebook_size < 2 || !self.codebook_size.is_power_of_two() {
            return config_err(format!(
                "codebook size {} must be a power of two >= 2",
                self.codebook_size
            ));
        }
        if self.channel_width == 0 || self.depth == 0 {
            return config_err("channel_width and depth must be positive");
        }
        Ok(())
    }

    pub fn bits_per_token(&self) -> u32 {
        self.codebook_size.trailing_zeros()
    }

    /// Token grid `(rows, cols)` at `1/f` resolution.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.height / self.downsample_factor,
            self.width / self.downsample_factor,
        )
    }

    /// Denoiser token grid at `1/16` resolution; also the condition resolution.
    pub fn token_dims(&self) -> (usize, usize) {
        (self.height / TOKEN_STRIDE, self.width / TOKEN_STRIDE)
    }

    /// Shape `(channels, h, w)` of the sample the diffusion model denoises.
    pub fn sample_dims(&self, latent_channels: usize) -> (usize, usize, usize) {
        match self.space {
            Space::Pixel => (3, self.height, self.width),
            Space::Latent => (
                latent_channels,
                self.height / LATENT_STRIDE,
                self.width / LATENT_STRIDE,
            ),
        }
    }

    /// Patch size applied to the diffusion sample to reach the token grid.
    pub fn patch_size(&self) -> usize {
        match self.space {
            Space::Pixel => TOKEN_STRIDE,
            Space::Latent => TOKEN_STRIDE / LATENT_STRIDE,
        }
    }

    pub fn with_preset(&self, preset: &CodecPreset) -> Self {
        Self {
            downsample_factor: preset.downsample_factor,
            codebook_size: preset.codebook_size,
            ..self.clone()
        }
    }
}

/// One of the shipped operating points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecPreset {
    pub name: &'static str,
    pub downsample_factor: usize,
    pub codebook_size: usize,
    /// Payload bits per pixel, `log2(N) / f^2`.
    pub nominal_bpp: f64,
}

impl CodecPreset {
    const fn new(name: &'static str, downsample_factor: usize, codebook_size: usize) -> Self {
        let bits = codebook_size.trailing_zeros() as f64;
        Self {
            name,
            downsample_factor,
            codebook_size,
            nominal_bpp: bits / (downsample_factor * downsample_factor) as f64,
        }
    }

    pub fn all() -> [CodecPreset; 4] {
        [COD_BASE, COD_64BIT, COD_MID, COD_HIGH]
    }

    pub fn by_name(name: &str) -> Result<CodecPreset> {
        Self::all()
            .into_iter()
            .find(|p| p.name == name)
            .map_or_else(|| config_err(format!("unknown preset `{name}`")), Ok)
    }
}

pub const COD_BASE: CodecPreset = CodecPreset::new("cod-base", 32, 16);
pub const COD_64BIT: CodecPreset = CodecPreset::new("cod-64bit", 128, 16);
pub const COD_MID: CodecPreset = CodecPreset::new("cod-mid", 16, 256);
pub const COD_HIGH: CodecPreset = CodecPreset::new("cod-high", 8, 256);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionerConfig {
    /// Dimension of codebook entries.
    pub code_dim: usize,
    /// Channel dimension of the decoded condition `c`.
    pub cond_dim: usize,
    /// Channels of the first encoder stage; doubled per stage up to `max_channel_mult`.
    pub base_channels: usize,
    pub max_channel_mult: usize,
    pub res_blocks: usize,
    /// Attention layers at the two lowest resolutions of encoder and decoder.
    pub attention: bool,
    pub ema_decay: f64,
    /// Steps of zero usage before a codebook entry is re-seeded.
    pub dead_after: u64,
    /// Hidden width of the auxiliary heads.
    pub aux_channels: usize,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            code_dim: 8,
            cond_dim: 32,
            base_channels: 32,
            max_channel_mult: 4,
            res_blocks: 4,
            attention: true,
            ema_decay: 0.99,
            dead_after: 256,
            aux_channels: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionInjection {
    /// Condition concatenated with the noised input only.
    Concat,
    /// Additionally injects a pooled condition embedding through AdaLN.
    ConcatAndAdaLn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of the `depth` blocks given to the decoupled head.
    pub head_blocks: Option<usize>,
    /// Hidden width of the per-token neural field in pixel mode.
    pub field_hidden: usize,
    /// Frequencies of the in-patch coordinate encoding.
    pub field_freqs: usize,
    pub pos_embed: bool,
    /// Zero-initialise AdaLN modulation and output layers.
    pub zero_init: bool,
    pub injection: ConditionInjection,
    pub time_freq_dim: usize,
    pub latent_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mlp_ratio: 4,
            head_blocks: None,
            field_hidden: 32,
            field_freqs: 4,
            pos_embed: true,
            zero_init: true,
            injection: ConditionInjection::Concat,
            time_freq_dim: 64,
            latent_channels: 4,
        }
    }
}

impl DenoiserConfig {
    /// `(backbone, head)` split of `depth`, 3:1 by default.
    pub fn split(&self, depth: usize) -> (usize, usize) {
        let head = self
            .head_blocks
            .unwrap_or_else(|| (depth / 4).max(1))
            .min(depth.saturating_sub(1));
        (depth - head, head)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    #[serde(default)]
    pub conditioner: ConditionerConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    /// Channel dimension of the external feature extractor targeted by REPA and the auxiliary head.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_feature_dim() -> usize {
    32
}

impl ModelConfig {
    pub fn new(codec: CodecConfig) -> Self {
        Self {
            codec,
            conditioner: ConditionerConfig::default(),
            denoiser: DenoiserConfig::default(),
            feature_dim: default_feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let d = &self.denoiser;
        if d.heads == 0 || !self.codec.channel_width.is_multiple_of(d.heads) {
            return config_err(format!(
                "channel_width {} not divisible by heads {}",
                self.codec.channel_width, d.heads
            ));
        }
        if self.codec.depth < 2 {
            return config_err("depth must be >= 2 to split backbone and head");
        }
        if !d.time_freq_dim.is_multiple_of(2) || d.time_freq_dim == 0 {
            return config_err("time_freq_dim must be even and positive");
        }
        let c = &self.conditioner;
        if c.code_dim == 0 || c.cond_dim == 0 || c.base_channels == 0 || c.max_channel_mult == 0 {
            return config_err("conditioner dimensions must be positive");
        }
        if self.feature_dim == 0 {
            return config_err("feature_dim must be positive");
        }
        if !(0.0..1.0).contains(&c.ema_decay) {
            return config_err("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    /// A small configuration for desk-scale experiments at `size x size`.
    pub fn desk(size: usize, downsample_factor: usize, width: usize) -> Self {
        let mut codec = CodecConfig::new(size, size, downsample_factor, 16);
        codec.channel_width = width;
        codec.depth = 4;
        Self {
            codec,
            conditioner: ConditionerConfig {
                code_dim: 8,
                cond_dim: 16,
                base_channels: 8,
                max_channel_mult: 4,
                res_blocks: 1,
                attention: true,
                aux_channels: 16,
                ..ConditionerConfig::default()
            },
            denoiser: DenoiserConfig {
                heads: (width / 16).max(1),
                mlp_ratio: 2,
                field_hidden: 16,
                field_freqs: 3,
                ..DenoiserConfig::default()
            },
            feature_dim: 16,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_bpp() {
        assert_eq!(COD_BASE.nominal_bpp, 4.0 / 1024.0);
        assert_eq!(COD_64BIT.nominal_bpp, 4.0 / 16384.0);
        assert_eq!(COD_MID.nominal_bpp, 8.0 / 256.0);
        assert_eq!(COD_HIGH.nominal_bpp, 0.125);
        assert!(CodecPreset::by_name("cod-nope").is_err());
    }

    #[test]
    fn validation() {
        assert!(CodecConfig::new(512, 512, 32, 16).validate().is_ok());
        assert!(CodecConfig::new(512, 500, 32, 16).validate().is_err());
        // divisible by f=8 but not by the token stride
        assert!(CodecConfig::new(520, 512, 8, 16).validate().is_err());
        assert!(CodecConfig::new(512, 512, 64, 16).validate().is_err());
        assert!(CodecConfig::new(512, 512, 32, 12).validate().is_err());
        assert!(CodecConfig::new(512, 512, 32, 1).validate().is_err());
        let mut c = CodecConfig::new(512, 512, 32, 16);
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn depth_split() {
        let d = DenoiserConfig::default();
        assert_eq!(d.split(4), (3, 1));
        assert_eq!(d.split(8), (6, 2));
        assert_eq!(d.split(2), (1, 1));
    }
}
