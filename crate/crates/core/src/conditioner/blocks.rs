use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Conv2d, GroupNorm, Scope, SelfAttention};

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(scope: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&scope.pp("norm1"), cin)?,
            conv1: Conv2d::new(&scope.pp("conv1"), cin, cout, 3, 1, 1)?,
            norm2: GroupNorm::new(&scope.pp("norm2"), cout)?,
            conv2: Conv2d::new(&scope.pp("conv2"), cout, cout, 3, 1, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&scope.pp("skip"), cin, cout, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(skip.add(&h)?)
    }
}

/// Single-head self-attention over spatial positions, residual.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl SpatialAttention {
    pub fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&scope.pp("norm"), channels)?,
            attn: SelfAttention::new(&scope.pp("attn"), channels, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let seq = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let y = self
            .attn
            .forward(&seq)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok(x.add(&y)?)
    }
}

/// Residual blocks followed by an optional attention layer.
#[derive(Debug, Clone)]
pub struct Stage {
    blocks: Vec<ResBlock>,
    attn: Option<SpatialAttention>,
}

impl Stage {
    pub fn new(
        scope: &Scope,
        cin: usize,
        cout: usize,
        blocks: usize,
        attention: bool,
    ) -> Result<Self> {
        let mut res = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let c_in = if i == 0 { cin } else { cout };
            res.push(ResBlock::new(&scope.pp(format!("res{i}")), c_in, cout)?);
        }
        let attn = if attention {
            Some(SpatialAttention::new(&scope.pp("attn"), cout)?)
        } else {
            None
        };
        Ok(Self { blocks: res, attn })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        if let Some(a) = &self.attn {
            h = a.forward(&h)?;
        }
        Ok(h)
    }
}
