use candle_core::{DType, Tensor};

use crate::config::{ConditionInjection, ModelConfig, PredictionTarget, Space, TOKEN_STRIDE};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::nn::{Dense, Init, ParamStore, Scope};
use crate::patch::patchify;

use super::block::{DitBlock, FinalModulation};
use super::embed::{dense_params, sincos_2d, TimestepEmbedder};
use super::head::{Head, LatentHead, PixelFieldHead};

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// In the configured target space, shaped like the clean sample.
    pub prediction: Tensor,
    /// Projected backbone features `(B, feature_dim, H/16, W/16)` for alignment.
    pub features: Tensor,
}

/// DiT backbone and decoupled head conditioned by token-level concatenation.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    pub time: TimestepEmbedder,
    pub cond_pool: Option<Dense>,
    pub null_cond: Tensor,
    pub embed: Dense,
    pub blocks: Vec<DitBlock>,
    backbone: usize,
    pub repa: (Dense, Dense),
    pub final_mod: FinalModulation,
    pub head: Head,
}

pub(crate) fn check_condition(
    c: &Tensor,
    batch: usize,
    cond_dim: usize,
    rows: usize,
    cols: usize,
) -> Result<()> {
    if c.dims() != [batch, cond_dim, rows, cols] {
        return Err(Error::Shape(format!(
            "condition {:?}, expected {:?}",
            c.dims(),
            [batch, cond_dim, rows, cols]
        )));
    }
    Ok(())
}

impl Denoiser {
    pub fn new(scope: &Scope, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.denoiser;
        let w = config.codec.channel_width;
        let cond_dim = config.conditioner.cond_dim;
        let p = config.codec.patch_size();
        let in_channels = match config.codec.space {
            Space::Pixel => 3,
            Space::Latent => d.latent_channels,
        };
        let (backbone, head_blocks) = d.split(config.codec.depth);
        let mut blocks = Vec::with_capacity(backbone + head_blocks);
        for i in 0..backbone + head_blocks {
            blocks.push(DitBlock::new(
                &scope.pp(format!("blocks.{i}")),
                w,
                d.heads,
                d.mlp_ratio,
                d.zero_init,
            )?);
        }
        let head = match config.codec.space {
            Space::Pixel => Head::Pixel(PixelFieldHead::new(
                &scope.pp("head"),
                w,
                p,
                d.field_hidden,
                d.field_freqs,
                d.zero_init,
            )?),
            Space::Latent => Head::Latent(LatentHead::new(
                &scope.pp("head"),
                w,
                d.latent_channels,
                p,
                d.zero_init,
            )?),
        };
        Ok(Self {
            config: config.clone(),
            time: TimestepEmbedder::new(&scope.pp("time"), d.time_freq_dim, w)?,
            cond_pool: match d.injection {
                ConditionInjection::Concat => None,
                ConditionInjection::ConcatAndAdaLn => {
                    Some(Dense::new(&scope.pp("cond_pool"), cond_dim, w)?)
                }
            },
            null_cond: scope.param("null_cond", &[cond_dim], Init::Normal(0.02))?,
            embed: Dense::new(&scope.pp("embed"), in_channels * p * p + cond_dim, w)?,
            blocks,
            backbone,
            repa: (
                Dense::new(&scope.pp("repa.fc1"), w, w)?,
                Dense::new(&scope.pp("repa.fc2"), w, config.feature_dim)?,
            ),
            final_mod: FinalModulation::new(&scope.pp("final"), w, d.zero_init)?,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone_depth(&self) -> usize {
        self.backbone
    }

    fn grid(&self, x_t: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = x_t.dims4()?;
        let expected = match self.config.codec.space {
            Space::Pixel => 3,
            Space::Latent => self.config.denoiser.latent_channels,
        };
        let p = self.config.codec.patch_size();
        if c != expected || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "noised input {:?} does not fit the model",
                x_t.dims()
            )));
        }
        Ok((b, h / p, w / p))
    }

    /// Learned unconditional condition broadcast to `(B, cond_dim, rows, cols)`.
    pub fn null_condition(&self, batch: usize, rows: usize, cols: usize) -> Result<Tensor> {
        let d = self.null_cond.dim(0)?;
        Ok(self
            .null_cond
            .reshape((1, d, 1, 1))?
            .broadcast_as((batch, d, rows, cols))?)
    }

    /// Replaces the condition of samples where `keep` is 0 by the null condition.
    pub fn drop_condition(&self, c: &Tensor, keep: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = c.dims4()?;
        let keep = keep.to_dtype(c.dtype())?.reshape((b, 1, 1, 1))?;
        let null = self.null_condition(b, h, w)?;
        Ok(c.broadcast_mul(&keep)?
            .add(&null.broadcast_mul(&keep.affine(-1.0, 1.0)?)?)?)
    }

    pub(crate) fn embed_tokens(
        embed: &Dense,
        null: &Tensor,
        config: &ModelConfig,
        x_t: &Tensor,
        cond: Option<&Tensor>,
        (b, rows, cols): (usize, usize, usize),
    ) -> Result<(Tensor, Tensor)> {
        let cond_dim = config.conditioner.cond_dim;
        let c = match cond {
            Some(c) => {
                check_condition(c, b, cond_dim, rows, cols)?;
                c.clone()
            }
            None => null
                .reshape((1, cond_dim, 1, 1))?
                .broadcast_as((b, cond_dim, rows, cols))?,
        };
        let xp = patchify(x_t, config.codec.patch_size())?;
        let cp = c.reshape((b, cond_dim, rows * cols))?.transpose(1, 2)?;
        let mut h = embed.forward(&Tensor::cat(&[&xp, &cp.to_dtype(xp.dtype())?], 2)?)?;
        if config.denoiser.pos_embed {
            let pos = sincos_2d(rows, cols, embed.out_dim(), h.dtype(), h.device())?;
            h = h.broadcast_add(&pos.unsqueeze(0)?)?;
        }
        Ok((h, c))
    }

    /// Activated conditioning vector fed to every modulation layer.
    pub fn conditioning(&self, t: &Tensor, c: &Tensor) -> Result<Tensor> {
        let mut e = self.time.forward(t)?;
        if let Some(pool) = &self.cond_pool {
            e = e.add(&pool.forward(&c.mean((2, 3))?)?)?;
        }
        Ok(e.silu()?)
    }

    pub fn forward(
        &self,
        x_t: &Tensor,
        t: &Tensor,
        cond: Option<&Tensor>,
    ) -> Result<DenoiserOutput> {
        let dims @ (b, rows, cols) = self.grid(x_t)?;
        if t.dims() != [b] {
            return Err(Error::Shape(format!("time {:?} for batch {b}", t.dims())));
        }
        let (mut h, c) =
            Self::embed_tokens(&self.embed, &self.null_cond, &self.config, x_t, cond, dims)?;
        let emb = self.conditioning(&t.to_dtype(h.dtype())?, &c)?;
        let tap = (self.backbone / 2).max(1);
        let mut features = None;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, &emb)?;
            if i + 1 == tap {
                let f = self.repa.1.forward(&self.repa.0.forward(&h)?.silu()?)?;
                features = Some(f.transpose(1, 2)?.reshape((b, (), rows, cols))?);
            }
        }
        let h = self.final_mod.forward(&h, &emb)?;
        let prediction = self.head.forward(&h, x_t, rows, cols)?;
        Ok(DenoiserOutput {
            prediction,
            features: features.expect("tap inside depth"),
        })
    }

    /// `uncond + scale * (cond - uncond)` in the target space.
    pub fn cfg_predict(&self, x_t: &Tensor, t: &Tensor, c: &Tensor, scale: f64) -> Result<Tensor> {
        if !(scale >= 0.0) {
            return Err(Error::Domain(format!(
                "guidance scale {scale} must be >= 0"
            )));
        }
        let cond = self.forward(x_t, t, Some(c))?.prediction;
        if scale == 1.0 {
            return Ok(cond);
        }
        let uncond = self.forward(x_t, t, None)?.prediction;
        Ok(uncond.add(&(cond.sub(&uncond)? * scale)?)?)
    }

    /// Attaches rank-`rank` adapters to every attention and MLP projection.
    pub fn attach_adapters(&mut self, store: &ParamStore, rank: usize) -> Result<()> {
        for b in &mut self.blocks {
            for d in [&mut b.attn.qkv, &mut b.attn.out, &mut b.fc1, &mut b.fc2] {
                d.attach_adapter(store, rank)?;
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.time.num_params()
            + self.null_cond.elem_count()
            + dense_params(&self.embed)
            + dense_params(&self.repa.0)
            + dense_params(&self.repa.1)
            + dense_params(&self.final_mod.ada)
            + self.head.num_params();
        n += self.cond_pool.as_ref().map_or(0, dense_params);
        n + self.blocks.iter().map(DitBlock::num_params).sum::<usize>()
    }

    pub fn dtype(&self) -> DType {
        self.embed.weight.dtype()
    }
}

impl VelocityField for Denoiser {
    fn target(&self) -> PredictionTarget {
        self.config.codec.prediction_target
    }

    fn predict(&self, x_t: &Tensor, t: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward(x_t, t, cond)?.prediction)
    }
}

/// Token grid `(rows, cols)` at `1/16` for an image of the configured size.
pub fn token_grid(config: &ModelConfig) -> (usize, usize) {
    (
        config.codec.height / TOKEN_STRIDE,
        config.codec.width / TOKEN_STRIDE,
    )
}
