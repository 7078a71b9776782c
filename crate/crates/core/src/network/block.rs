use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{layer_norm, Dense, Init, Scope, SelfAttention};

use super::embed::dense_params;

pub(crate) const LN_EPS: f64 = 1e-6;

/// `LN(x) * (1 + scale) + shift` with `(B, 1, W)` modulation.
pub(crate) fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let h = layer_norm(x, LN_EPS)?;
    Ok(h.broadcast_mul(&scale.affine(1.0, 1.0)?)?
        .broadcast_add(shift)?)
}

/// Splits `(B, k*W)` modulation into `k` tensors of shape `(B, 1, W)`.
pub(crate) fn chunks(m: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let (b, d) = m.dims2()?;
    let m = m.reshape((b, k, d / k))?;
    (0..k).map(|i| Ok(m.narrow(1, i, 1)?)).collect()
}

fn ada_init(zero: bool, width: usize) -> Init {
    if zero {
        Init::Zeros
    } else {
        Init::FanIn(width)
    }
}

/// Transformer block with AdaLN-Zero timestep modulation.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub ada: Dense,
    pub attn: SelfAttention,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl DitBlock {
    pub fn new(
        scope: &Scope,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let init = ada_init(zero_init, width);
        Ok(Self {
            ada: Dense::with_init(&scope.pp("ada"), width, 6 * width, init, init)?,
            attn: SelfAttention::new(&scope.pp("attn"), width, heads)?,
            fc1: Dense::new(&scope.pp("fc1"), width, mlp_ratio * width)?,
            fc2: Dense::new(&scope.pp("fc2"), mlp_ratio * width, width)?,
        })
    }

    /// `(B, 6W)` modulation for an activated conditioning vector.
    pub fn modulation(&self, emb: &Tensor) -> Result<Tensor> {
        self.ada.forward(emb)
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let m = chunks(&self.modulation(emb)?, 6)?;
        let h = self.attn.forward(&modulate(x, &m[0], &m[1])?)?;
        let x = x.add(&h.broadcast_mul(&m[2])?)?;
        let h = self
            .fc2
            .forward(&self.fc1.forward(&modulate(&x, &m[3], &m[4])?)?.gelu()?)?;
        Ok(x.add(&h.broadcast_mul(&m[5])?)?)
    }

    pub fn num_params(&self) -> usize {
        [
            &self.ada,
            &self.attn.qkv,
            &self.attn.out,
            &self.fc1,
            &self.fc2,
        ]
        .into_iter()
        .map(dense_params)
        .sum()
    }
}

/// Final AdaLN layer: `(B, 2W)` shift and scale applied before the head.
#[derive(Debug, Clone)]
pub struct FinalModulation {
    pub ada: Dense,
}

impl FinalModulation {
    pub fn new(scope: &Scope, width: usize, zero_init: bool) -> Result<Self> {
        let init = ada_init(zero_init, width);
        Ok(Self {
            ada: Dense::with_init(&scope.pp("ada"), width, 2 * width, init, init)?,
        })
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let m = chunks(&self.ada.forward(emb)?, 2)?;
        modulate(x, &m[0], &m[1])
    }
}
