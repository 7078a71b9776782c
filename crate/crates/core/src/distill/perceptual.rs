use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::model::CodModel;
use crate::nn::{mse, scalar, seeded_rng, silu, Conv2d, ParamStore};
use crate::training::trainer::clip_gradients;

use super::dmd::{dmd_direction, dmd_surrogate};
use super::state::{Critics, DistillConfig};

/// A trained codec model acting as a perceptual loss for another decoder.
pub struct PerceptualSupervisor {
    pub critics: Critics,
    pub config: DistillConfig,
}

impl PerceptualSupervisor {
    pub fn new(teacher: &CodModel, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if !teacher.is_trained()? {
            return Err(Error::State(
                "supervising model has not been trained".into(),
            ));
        }
        let critics = Critics::new(teacher, &config)?;
        Ok(Self { critics, config })
    }

    /// Distribution-matching loss on externally decoded images `x_ext`
    /// (gradients flow into `x_ext`), conditioned on the originals.
    pub fn loss(&self, x_ext: &Tensor, originals: &Tensor, seed: u64) -> Result<Tensor> {
        self.critics.real.verify()?;
        let model = &self.critics.real.model;
        let sample = model.to_sample(x_ext)?;
        let cond = self.critics.real_condition(originals)?;
        let mut rng = seeded_rng(seed);
        let g = dmd_direction(
            &sample,
            Some(&cond),
            &model.denoiser,
            &self.critics.fake.denoiser,
            self.config.real_cfg_scale,
            self.config.weighting,
            &self.config.times(),
            &mut rng,
        )?;
        dmd_surrogate(&sample, &g)
    }

    /// Fits the fake score model to the current external outputs.
    pub fn fake_step(&mut self, x_ext: &Tensor, originals: &Tensor, seed: u64) -> Result<f64> {
        let sample = self.critics.fake.to_sample(&x_ext.detach())?;
        let cond = self.critics.real_condition(originals)?;
        self.critics
            .fake_score_step(&sample, &cond, seed, self.config.grad_clip)
    }
}

const ENC: &str = "toy.encoder";
const DEC: &str = "toy.decoder";

/// Small convolutional autoencoder with a rounded bottleneck at 1/4 resolution.
#[derive(Debug, Clone)]
pub struct ToyMseCodec {
    pub store: Arc<ParamStore>,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    latent_channels: usize,
    levels: f64,
}

impl ToyMseCodec {
    pub fn new(
        seed: u64,
        latent_channels: usize,
        levels: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if latent_channels == 0 || levels == 0 {
            return Err(Error::Config(
                "toy codec needs positive latent channels and levels".into(),
            ));
        }
        let store = Arc::new(ParamStore::new(seed, dtype, device));
        let e = store.root().pp(ENC);
        let d = store.root().pp(DEC);
        let enc = vec![
            Conv2d::new(&e.pp("0"), 3, 16, 3, 2, 1)?,
            Conv2d::new(&e.pp("1"), 16, 32, 3, 2, 1)?,
            Conv2d::new(&e.pp("2"), 32, latent_channels, 1, 1, 0)?,
        ];
        let dec = vec![
            Conv2d::new(&d.pp("0"), latent_channels, 32, 3, 1, 1)?,
            Conv2d::new(&d.pp("1"), 32, 32, 3, 1, 1)?,
            Conv2d::new(&d.pp("2"), 32, 16, 3, 1, 1)?,
            Conv2d::new(&d.pp("3"), 16, 3, 3, 1, 1)?,
        ];
        Ok(Self {
            store,
            enc,
            dec,
            latent_channels,
            levels: levels as f64,
        })
    }

    /// Quantised latent; the rounding passes gradients straight through.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.enc[0].forward(x)?)?;
        let h = silu(&self.enc[1].forward(&h)?)?;
        let z = (self.enc[2].forward(&h)?.tanh()? * self.levels)?;
        let rounded = z.round()?;
        Ok(((&z + rounded.sub(&z)?.detach())? / self.levels)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let h = silu(&self.dec[0].forward(z)?)?;
        let (_, _, hh, ww) = h.dims4()?;
        let h = h.upsample_nearest2d(hh * 2, ww * 2)?;
        let h = silu(&self.dec[1].forward(&h)?)?;
        let h = h.upsample_nearest2d(hh * 4, ww * 4)?;
        let h = silu(&self.dec[2].forward(&h)?)?;
        self.dec[3].forward(&h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn duplicate(&self) -> Result<Self> {
        let copy = Self::new(
            0,
            self.latent_channels,
            self.levels as usize,
            self.store.dtype(),
            self.store.device(),
        )?;
        copy.store.load(&self.store.tensors())?;
        Ok(copy)
    }

    /// Trains encoder and decoder on pixel MSE. Returns the final batch loss.
    pub fn train_mse(
        &self,
        data: &Dataset,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<f64> {
        self.fit(data, steps, batch, lr, seed, true, None)
    }

    /// Trains only the decoder (encoder frozen) on MSE plus, when given,
    /// `weight` times the supervisor's loss. The fake score model receives
    /// `supervisor.config.ratio - 1` updates per decoder update.
    pub fn finetune_decoder(
        &self,
        data: &Dataset,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
        supervisor: Option<(&mut PerceptualSupervisor, f64)>,
    ) -> Result<f64> {
        self.fit(data, steps, batch, lr, seed, false, supervisor)
    }

    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        data: &Dataset,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
        train_encoder: bool,
        mut supervisor: Option<(&mut PerceptualSupervisor, f64)>,
    ) -> Result<f64> {
        let vars: Vec<_> = self
            .store
            .vars_where(|n| n.starts_with(DEC) || (train_encoder && n.starts_with(ENC)))
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let mut opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut sampler = BatchSampler::new(data.len(), batch, seed)?;
        let dtype = self.store.dtype();
        let dev = self.store.device().clone();
        let mut last = f64::NAN;
        for step in 0..steps {
            let x = data.batch(&sampler.next_indices(), dtype, &dev)?;
            let z = self.encode(&x)?;
            let z = if train_encoder { z } else { z.detach() };
            let recon = self.decode(&z)?;
            let mut loss = mse(&recon, &x)?;
            if let Some((sup, weight)) = supervisor.as_mut() {
                let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64;
                for k in 1..sup.config.ratio {
                    sup.fake_step(&recon, &x, s ^ ((k as u64) << 40))?;
                }
                loss = loss.add(&(sup.loss(&recon, &x, s)? * *weight)?)?;
            }
            last = scalar(&loss)?;
            if !last.is_finite() {
                return Err(Error::NonFinite(format!(
                    "toy codec step {step}: loss {last}"
                )));
            }
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, &vars, 1.0)?;
            opt.step(&grads)?;
        }
        Ok(last)
    }
}
