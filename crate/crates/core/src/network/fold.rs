//! Constant folding of timestep modulation for a model evaluated only at `t = 0`.

use candle_core::{DType, Tensor};

use crate::config::{ConditionInjection, ModelConfig, PredictionTarget};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::nn::{layer_norm, Dense, SelfAttention};

use super::block::{chunks, LN_EPS};
use super::denoiser::Denoiser;
use super::embed::dense_params;
use super::head::Head;

/// `layer(LN(x) * (1 + scale) + shift)` as a single affine layer on `LN(x)`.
fn fold_input(layer: &Dense, shift: &Tensor, scale: &Tensor) -> Result<Dense> {
    let w = layer.effective_weight()?.detach();
    let in_dim = w.dim(1)?;
    let w_new = w.broadcast_mul(&scale.affine(1.0, 1.0)?.reshape((1, in_dim))?)?;
    let shifted = w.matmul(&shift.reshape((in_dim, 1))?)?.squeeze(1)?;
    let b_new = match &layer.bias {
        Some(b) => b.detach().add(&shifted)?,
        None => shifted,
    };
    Ok(Dense::from_tensors(w_new, Some(b_new)))
}

/// `gate * layer(x)` as a single affine layer.
fn fold_output(layer: &Dense, gate: &Tensor) -> Result<Dense> {
    let w = layer.effective_weight()?.detach();
    let out_dim = w.dim(0)?;
    let w_new = w.broadcast_mul(&gate.reshape((out_dim, 1))?)?;
    let b_new = match &layer.bias {
        Some(b) => b.detach().mul(gate)?,
        None => Tensor::zeros(out_dim, w.dtype(), w.device())?,
    };
    Ok(Dense::from_tensors(w_new, Some(b_new)))
}

pub(crate) fn plain(layer: &Dense) -> Result<Dense> {
    Ok(Dense::from_tensors(
        layer.effective_weight()?.detach(),
        layer.bias.as_ref().map(|b| b.detach()),
    ))
}

#[derive(Debug, Clone)]
pub struct FoldedBlock {
    pub attn: SelfAttention,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl FoldedBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&layer_norm(x, LN_EPS)?)?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&layer_norm(&x, LN_EPS)?)?.gelu()?)?;
        Ok(x.add(&h)?)
    }

    fn num_params(&self) -> usize {
        [&self.attn.qkv, &self.attn.out, &self.fc1, &self.fc2]
            .into_iter()
            .map(dense_params)
            .sum()
    }
}

/// A denoiser with all AdaLN modulation baked in; only valid at `t = 0`.
#[derive(Debug, Clone)]
pub struct FoldedDenoiser {
    config: ModelConfig,
    null_cond: Tensor,
    embed: Dense,
    blocks: Vec<FoldedBlock>,
    head: Head,
}

/// Folds a concatenation-conditioned denoiser at `t = 0`. Low-rank adapters are merged.
pub fn fold_adaln(model: &Denoiser) -> Result<FoldedDenoiser> {
    let config = model.config().clone();
    if config.denoiser.injection != ConditionInjection::Concat {
        return Err(Error::Contract(
            "modulation depends on the condition; folding requires concatenation-only conditioning"
                .into(),
        ));
    }
    let dev = model.null_cond.device();
    let t = Tensor::zeros(1, model.dtype(), dev)?;
    let emb = model.time.forward(&t)?.silu()?.detach();
    let squeeze = |m: &Tensor| -> Result<Tensor> { Ok(m.squeeze(0)?.squeeze(0)?) };
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let m: Vec<Tensor> = chunks(&b.modulation(&emb)?, 6)?
            .iter()
            .map(squeeze)
            .collect::<Result<_>>()?;
        blocks.push(FoldedBlock {
            attn: SelfAttention {
                qkv: fold_input(&b.attn.qkv, &m[0], &m[1])?,
                out: fold_output(&b.attn.out, &m[2])?,
                heads: b.attn.heads,
            },
            fc1: fold_input(&b.fc1, &m[3], &m[4])?,
            fc2: fold_output(&b.fc2, &m[5])?,
        });
    }
    let m: Vec<Tensor> = chunks(&model.final_mod.ada.forward(&emb)?, 2)?
        .iter()
        .map(squeeze)
        .collect::<Result<_>>()?;
    let head_in = fold_input(model.head.input_layer(), &m[0], &m[1])?;
    let head = model.head.with_input_layer(head_in).detached()?;
    Ok(FoldedDenoiser {
        config,
        null_cond: model.null_cond.detach(),
        embed: plain(&model.embed)?,
        blocks,
        head,
    })
}

impl FoldedDenoiser {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.null_cond.elem_count()
            + dense_params(&self.embed)
            + self.head.num_params()
            + self
                .blocks
                .iter()
                .map(FoldedBlock::num_params)
                .sum::<usize>()
    }

    pub fn forward(&self, x_t: &Tensor, t: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let ts: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if ts.iter().any(|&v| v != 0.0) {
            return Err(Error::Contract(
                "folded model is only defined at t = 0".into(),
            ));
        }
        let (b, _, h, w) = x_t.dims4()?;
        let p = self.config.codec.patch_size();
        if h % p != 0 || w % p != 0 || ts.len() != b {
            return Err(Error::Shape(format!(
                "input {:?} with time {:?}",
                x_t.dims(),
                t.dims()
            )));
        }
        let dims = (b, h / p, w / p);
        let (mut tok, _) =
            Denoiser::embed_tokens(&self.embed, &self.null_cond, &self.config, x_t, cond, dims)?;
        for blk in &self.blocks {
            tok = blk.forward(&tok)?;
        }
        let tok = layer_norm(&tok, LN_EPS)?;
        self.head.forward(&tok, x_t, dims.1, dims.2)
    }
}

impl VelocityField for FoldedDenoiser {
    fn target(&self) -> PredictionTarget {
        self.config.codec.prediction_target
    }

    fn predict(&self, x_t: &Tensor, t: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}
