use candle_core::Tensor;

use crate::config::{CodecConfig, ConditionerConfig, TOKEN_STRIDE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Scope};

use super::blocks::Stage;

fn channels(cfg: &ConditionerConfig, level: usize) -> usize {
    cfg.base_channels * (1usize << level.min(16)).min(cfg.max_channel_mult)
}

/// Image to pre-quantisation grid at `1/f` resolution.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    conv_in: Conv2d,
    stages: Vec<(Stage, Conv2d)>,
    mid: Stage,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    factor: usize,
}

impl ConditionEncoder {
    pub fn new(scope: &Scope, codec: &CodecConfig, cfg: &ConditionerConfig) -> Result<Self> {
        let levels = codec.downsample_factor.trailing_zeros() as usize;
        let conv_in = Conv2d::new(&scope.pp("conv_in"), 3, channels(cfg, 0), 3, 1, 1)?;
        let mut stages = Vec::with_capacity(levels);
        for l in 0..levels {
            let (cin, cout) = (channels(cfg, l), channels(cfg, l + 1));
            // attention at the two lowest resolutions: the last stage here and `mid`
            let attn = cfg.attention && l + 1 == levels;
            let s = scope.pp(format!("down{l}"));
            stages.push((
                Stage::new(&s.pp("stage"), cin, cin, cfg.res_blocks, attn)?,
                Conv2d::new(&s.pp("downsample"), cin, cout, 3, 2, 1)?,
            ));
        }
        let c_low = channels(cfg, levels);
        Ok(Self {
            conv_in,
            stages,
            mid: Stage::new(
                &scope.pp("mid"),
                c_low,
                c_low,
                cfg.res_blocks.max(1),
                cfg.attention,
            )?,
            norm_out: GroupNorm::new(&scope.pp("norm_out"), c_low)?,
            conv_out: Conv2d::new(&scope.pp("conv_out"), c_low, cfg.code_dim, 1, 1, 0)?,
            factor: codec.downsample_factor,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Config(format!(
                "image {:?} incompatible with downsample factor {}",
                image.dims(),
                self.factor
            )));
        }
        let mut x = self.conv_in.forward(image)?;
        for (stage, down) in &self.stages {
            x = down.forward(&stage.forward(&x)?)?;
        }
        let x = self.mid.forward(&x)?;
        self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)
    }
}

/// Token-grid embeddings at `1/f` to the condition `c` at `1/16`.
#[derive(Debug, Clone)]
pub struct ConditionDecoder {
    conv_in: Conv2d,
    mid: Stage,
    ups: Vec<(Stage, Conv2d)>,
    down: Option<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    code_dim: usize,
}

impl ConditionDecoder {
    pub fn new(scope: &Scope, codec: &CodecConfig, cfg: &ConditionerConfig) -> Result<Self> {
        let f = codec.downsample_factor;
        let levels = f.trailing_zeros() as usize;
        let c_low = channels(cfg, levels);
        let mut ups = Vec::new();
        let mut c = c_low;
        let n_up = if f > TOKEN_STRIDE {
            (f / TOKEN_STRIDE).trailing_zeros() as usize
        } else {
            0
        };
        for i in 0..n_up {
            let cout = channels(cfg, levels - i - 1);
            let s = scope.pp(format!("up{i}"));
            ups.push((
                Stage::new(
                    &s.pp("stage"),
                    c,
                    c,
                    cfg.res_blocks,
                    cfg.attention && i == 0,
                )?,
                Conv2d::new(&s.pp("conv"), c, cout, 3, 1, 1)?,
            ));
            c = cout;
        }
        let down = if f < TOKEN_STRIDE {
            let steps = (TOKEN_STRIDE / f).trailing_zeros() as usize;
            if steps != 1 {
                return Err(Error::Config(format!("unsupported downsample factor {f}")));
            }
            Some(Conv2d::new(&scope.pp("downsample"), c, c, 3, 2, 1)?)
        } else {
            None
        };
        Ok(Self {
            conv_in: Conv2d::new(&scope.pp("conv_in"), cfg.code_dim, c_low, 3, 1, 1)?,
            mid: Stage::new(
                &scope.pp("mid"),
                c_low,
                c_low,
                cfg.res_blocks.max(1),
                cfg.attention,
            )?,
            ups,
            down,
            norm_out: GroupNorm::new(&scope.pp("norm_out"), c)?,
            conv_out: Conv2d::new(&scope.pp("conv_out"), c, cfg.cond_dim, 1, 1, 0)?,
            code_dim: cfg.code_dim,
        })
    }

    pub fn forward(&self, z_q: &Tensor) -> Result<Tensor> {
        let (_, d, h, w) = z_q.dims4()?;
        if d != self.code_dim {
            return Err(Error::Config(format!(
                "grid has {d} channels, decoder expects {}",
                self.code_dim
            )));
        }
        let mut x = self.mid.forward(&self.conv_in.forward(z_q)?)?;
        let (mut h, mut w) = (h, w);
        for (stage, conv) in &self.ups {
            x = stage.forward(&x)?;
            h *= 2;
            w *= 2;
            x = conv.forward(&x.upsample_nearest2d(h, w)?)?;
        }
        if let Some(d) = &self.down {
            x = d.forward(&x)?;
        }
        self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)
    }
}
