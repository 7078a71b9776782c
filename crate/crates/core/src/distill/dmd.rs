use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    broadcast_time, forward_process, guided_velocity, v_to_x, velocity, VelocityField,
};
use crate::model::CodModel;
use crate::nn::gaussian;

/// How the denoised-estimate difference is scaled before it is used as the
/// generator gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmdWeighting {
    /// Divide by the per-sample mean of `|x - x̂_real|`.
    MeanAbs,
    /// Convert to a score difference and apply the chain factor of `x_t`:
    /// `t² (x̂_fake - x̂_real) / (1 - t)²`, the gradient of the KL between the
    /// noised distributions.
    Score,
}

/// A model whose weights must not change while it provides the real score.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub model: CodModel,
    checksum: f64,
}

impl FrozenModel {
    /// Takes an independent copy so no optimiser can hold its variables.
    pub fn new(model: &CodModel) -> Result<Self> {
        let model = model.duplicate()?;
        let checksum = model.checksum()?;
        Ok(Self { model, checksum })
    }

    pub fn checksum(&self) -> f64 {
        self.checksum
    }

    pub fn verify(&self) -> Result<()> {
        let now = self.model.checksum()?;
        if now != self.checksum {
            return Err(Error::Contract(format!(
                "real score model changed (checksum {} -> {now})",
                self.checksum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmdTimeRange {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DmdTimeRange {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

impl DmdTimeRange {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.t_max <= self.t_min {
            self.t_min
        } else {
            rng.random_range(self.t_min..self.t_max)
        }
    }
}

/// Detached generator gradient direction `g` for samples `x_gen` (sample space).
///
/// Draws one `t` and one noise per sample, forms `x_t`, and compares the
/// denoised estimates of the real (optionally guided) and fake models.
#[allow(clippy::too_many_arguments)]
pub fn dmd_direction<R: VelocityField + ?Sized, F: VelocityField + ?Sized>(
    x_gen: &Tensor,
    cond: Option<&Tensor>,
    real: &R,
    fake: &F,
    real_cfg: f64,
    weighting: DmdWeighting,
    times: &DmdTimeRange,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let x = x_gen.detach();
    let cond = cond.map(|c| c.detach());
    let b = x.dim(0)?;
    let ts: Vec<f64> = (0..b).map(|_| times.sample(rng)).collect();
    if ts.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::Domain(
            "DMD times must lie strictly inside (0, 1)".into(),
        ));
    }
    let t = Tensor::from_vec(ts.clone(), b, x.device())?.to_dtype(x.dtype())?;
    let eps = gaussian(rng, x.dims(), x.dtype(), x.device())?;
    let x_t = forward_process(&x, &eps, &t)?;
    let v_real = guided_velocity(real, &x_t, &t, cond.as_ref(), real_cfg)?;
    let v_fake = velocity(fake, &x_t, &t, cond.as_ref())?;
    let x_real = v_to_x(&v_real, &x_t, &t)?;
    let x_fake = v_to_x(&v_fake, &x_t, &t)?;
    let diff = x_fake.sub(&x_real)?;
    let g = match weighting {
        DmdWeighting::MeanAbs => {
            let norm = x.sub(&x_real)?.abs()?.flatten_from(1)?.mean(1)?;
            let norm = (norm + 1e-6)?;
            diff.broadcast_div(&broadcast_time(&norm, &diff)?)?
        }
        DmdWeighting::Score => {
            let w: Vec<f64> = ts.iter().map(|t| t * t / ((1.0 - t) * (1.0 - t))).collect();
            let w = Tensor::from_vec(w, b, x.device())?.to_dtype(x.dtype())?;
            diff.broadcast_mul(&broadcast_time(&w, &diff)?)?
        }
    };
    Ok(g.detach())
}

/// `0.5 * mean((x - sg(x - g))²)`, whose gradient w.r.t. `x` is `g / numel`.
pub fn dmd_surrogate(x_gen: &Tensor, g: &Tensor) -> Result<Tensor> {
    let target = x_gen.sub(g)?.detach();
    Ok((x_gen.sub(&target)?.sqr()?.mean_all()? * 0.5)?)
}
