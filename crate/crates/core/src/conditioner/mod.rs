//! Condition encoder, vector-quantised bottleneck, condition decoder and
//! auxiliary heads.

mod aux;
mod blocks;
mod encoder;
mod quantizer;

use std::sync::Arc;

use candle_core::Tensor;

pub use aux::{aux_loss, AuxHeads, AuxLoss, AuxPrediction, AUX_FEATURE_WEIGHT};
pub use encoder::{ConditionDecoder, ConditionEncoder};
pub use quantizer::{nearest, Codebook, Quantized};

use crate::bitstream::TokenGrid;
use crate::config::{ModelConfig, TOKEN_STRIDE};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct ConditionOutput {
    pub z_e: Tensor,
    pub quantized: Quantized,
    /// `(B, cond_dim, H/16, W/16)`.
    pub c: Tensor,
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    pub encoder: ConditionEncoder,
    pub codebook: Codebook,
    pub decoder: ConditionDecoder,
    pub aux: AuxHeads,
    cond_dim: usize,
}

impl Conditioner {
    pub fn new(store: &Arc<ParamStore>, prefix: &str, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let scope = store.root().pp(prefix);
        let cc = &config.conditioner;
        let codebook_prefix = scope.path("codebook");
        Ok(Self {
            encoder: ConditionEncoder::new(&scope.pp("encoder"), &config.codec, cc)?,
            codebook: Codebook::new(
                store,
                &codebook_prefix,
                config.codec.codebook_size,
                cc.code_dim,
                cc.ema_decay,
                cc.dead_after,
            )?,
            decoder: ConditionDecoder::new(&scope.pp("decoder"), &config.codec, cc)?,
            aux: AuxHeads::new(
                &scope.pp("aux"),
                cc.cond_dim,
                cc.aux_channels,
                config.feature_dim,
            )?,
            cond_dim: cc.cond_dim,
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        self.encoder.forward(image)
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<Quantized> {
        self.codebook.quantize(z_e)
    }

    pub fn dequantize(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        self.codebook.dequantize(grids)
    }

    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z_q)
    }

    /// Condition from token grids, as on the decoder side.
    pub fn condition_from_tokens(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        self.decode(&self.dequantize(grids)?)
    }

    pub fn forward(&self, image: &Tensor) -> Result<ConditionOutput> {
        let z_e = self.encode(image)?;
        let quantized = self.quantize(&z_e)?;
        let c = self.decode(&quantized.z_q)?;
        let (_, _, h, w) = image.dims4()?;
        if c.dims()[2..] != [h / TOKEN_STRIDE, w / TOKEN_STRIDE] {
            return Err(Error::Shape(format!(
                "condition {:?} for image {h}x{w}",
                c.dims()
            )));
        }
        Ok(ConditionOutput { z_e, quantized, c })
    }

    pub fn aux(&self, c: &Tensor) -> Result<AuxPrediction> {
        self.aux.forward(c)
    }
}
