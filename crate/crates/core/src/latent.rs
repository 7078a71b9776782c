//! Sample spaces for the denoiser: raw pixels, or the latents of a small
//! frozen autoencoder standing in for a pretrained VAE.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::config::LATENT_STRIDE;
use crate::data::{quantize_tensor, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{mse, scalar, Conv2d, ParamStore};

/// Maps images to the space the denoiser works in and back.
pub trait Autoencoder: Send + Sync {
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// The pixel space itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityAdapter;

impl Autoencoder for IdentityAdapter {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

/// Three stride-2 convolutions down to `1/8` resolution and a mirrored decoder.
#[derive(Debug, Clone)]
pub struct LatentAdapter {
    pub store: Arc<ParamStore>,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    channels: usize,
}

const HIDDEN: [usize; 3] = [16, 32, 32];

impl LatentAdapter {
    pub fn new(store: Arc<ParamStore>, channels: usize) -> Result<Self> {
        let root = store.root().pp("latent_adapter");
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &c) in HIDDEN.iter().enumerate() {
            enc.push(Conv2d::new(&root.pp(format!("enc{i}")), cin, c, 3, 2, 1)?);
            cin = c;
        }
        enc.push(Conv2d::new(&root.pp("enc_out"), cin, channels, 1, 1, 0)?);
        let mut dec = vec![Conv2d::new(
            &root.pp("dec_in"),
            channels,
            HIDDEN[2],
            3,
            1,
            1,
        )?];
        let mut cin = HIDDEN[2];
        for (i, &c) in HIDDEN.iter().rev().enumerate() {
            dec.push(Conv2d::new(&root.pp(format!("dec{i}")), cin, c, 3, 1, 1)?);
            cin = c;
        }
        dec.push(Conv2d::new(&root.pp("dec_out"), cin, 3, 3, 1, 1)?);
        Ok(Self {
            store,
            enc,
            dec,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Reconstruction training with AdamW on seeded mini-batches; returns the final loss.
    pub fn fit(
        &self,
        data: &Dataset,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64> {
        let mut sampler = BatchSampler::new(data.len(), batch, seed)?;
        let mut opt = AdamW::new(
            self.store.all_vars(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut last = f64::NAN;
        for _ in 0..steps {
            let x = data.batch(
                &sampler.next_indices(),
                self.store.dtype(),
                self.store.device(),
            )?;
            let loss = mse(&self.decode(&self.encode(&x)?)?, &x)?;
            last = scalar(&loss)?;
            if !last.is_finite() {
                return Err(Error::NonFinite(format!("latent adapter loss {last}")));
            }
            opt.backward_step(&loss)?;
        }
        Ok(last)
    }
}

impl Autoencoder for LatentAdapter {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} not divisible by {LATENT_STRIDE}"
            )));
        }
        let mut x = images.clone();
        let last = self.enc.len() - 1;
        for (i, c) in self.enc.iter().enumerate() {
            x = c.forward(&x)?;
            if i < last {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let mut x = self.dec[0].forward(latents)?.silu()?;
        for c in &self.dec[1..self.dec.len() - 1] {
            let (_, _, h, w) = x.dims4()?;
            x = c.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?.silu()?;
        }
        Ok(self.dec[self.dec.len() - 1].forward(&x)?.tanh()?)
    }
}

/// `(psnr_db, feature_distance)` of the adapter's own 8-bit reconstructions,
/// the best any latent-space decoder built on it can reach.
pub fn latent_roundtrip_ceiling(
    adapter: &dyn Autoencoder,
    data: &Dataset,
    extractor: &dyn crate::extractor::FeatureExtractor,
    dtype: DType,
    device: &Device,
) -> Result<(f64, f64)> {
    let x = data.all(dtype, device)?;
    let rec = quantize_tensor(&adapter.decode(&adapter.encode(&x)?)?)?;
    let psnr = crate::eval::psnr_signed(&x, &rec)?.db;
    let fd = crate::extractor::feature_distance(extractor, &x, &rec)?
        .mean_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok((psnr, fd))
}
