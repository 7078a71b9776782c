//! Rectified-flow process: linear interpolant, target conversions and ODE samplers.
//!
//! Time runs from `t = 0` (pure noise) to `t = 1` (data):
//! `x_t = t * x + (1 - t) * eps`, with constant velocity `v = x - eps`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PredictionTarget;
use crate::error::{Error, Result};
use crate::nn::{gaussian, seeded_rng};

/// Lower bound on `1 - t` when converting a clean-sample prediction to velocity.
pub const X_TO_V_MIN_DENOM: f64 = 0.05;

/// A denoiser as seen by the samplers.
pub trait VelocityField {
    fn target(&self) -> PredictionTarget;

    /// Raw prediction in the model's target space. `t` has shape `(batch,)`;
    /// `cond = None` selects the unconditional branch.
    fn predict(&self, x_t: &Tensor, t: &Tensor, cond: Option<&Tensor>) -> Result<Tensor>;
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn target(&self) -> PredictionTarget {
        (**self).target()
    }

    fn predict(&self, x_t: &Tensor, t: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        (**self).predict(x_t, t, cond)
    }
}

/// Reshapes a `(batch,)` time vector so it broadcasts against `like`.
pub fn broadcast_time(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    let b = like.dim(0)?;
    if t.dims() != [b] {
        return Err(Error::Shape(format!(
            "time vector {:?} does not match batch {b}",
            t.dims()
        )));
    }
    let mut shape = vec![1usize; like.rank()];
    shape[0] = b;
    Ok(t.to_dtype(like.dtype())?.reshape(shape)?)
}

/// A full time vector of value `t` for a batch of `batch`.
pub fn time_vector(
    t: f64,
    batch: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    Ok(Tensor::full(t, batch, device)?.to_dtype(dtype)?)
}

fn check_unit_interval(t: &Tensor) -> Result<()> {
    let vals = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("t = {bad} outside [0, 1]")));
    }
    Ok(())
}

pub fn forward_process(x: &Tensor, eps: &Tensor, t: &Tensor) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "x {:?} vs eps {:?}",
            x.dims(),
            eps.dims()
        )));
    }
    check_unit_interval(t)?;
    let tb = broadcast_time(t, x)?;
    let one_minus = tb.affine(-1.0, 1.0)?;
    Ok(x.broadcast_mul(&tb)?.add(&eps.broadcast_mul(&one_minus)?)?)
}

pub fn velocity_target(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if x.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "x {:?} vs eps {:?}",
            x.dims(),
            eps.dims()
        )));
    }
    Ok(x.sub(eps)?)
}

/// Clean-sample estimate `x_t + (1 - t) v`; equals `x_t` at `t = 1`.
pub fn v_to_x(v: &Tensor, x_t: &Tensor, t: &Tensor) -> Result<Tensor> {
    let one_minus = broadcast_time(t, x_t)?.affine(-1.0, 1.0)?;
    Ok(x_t.add(&v.broadcast_mul(&one_minus)?)?)
}

/// Velocity from a clean-sample prediction, `(x - x_t) / clamp(1 - t, 0.05, 1)`.
pub fn x_to_v(x_pred: &Tensor, x_t: &Tensor, t: &Tensor) -> Result<Tensor> {
    let denom = broadcast_time(t, x_t)?
        .affine(-1.0, 1.0)?
        .clamp(X_TO_V_MIN_DENOM, 1.0)?;
    Ok(x_pred.sub(x_t)?.broadcast_div(&denom)?)
}

/// Model output converted to velocity.
pub fn velocity<M: VelocityField + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let out = model.predict(x_t, t, cond)?;
    match model.target() {
        PredictionTarget::V => Ok(out),
        PredictionTarget::X => x_to_v(&out, x_t, t),
    }
}

/// `uncond + scale * (cond - uncond)` in velocity space.
///
/// For clean-sample models this equals guidance in sample space, since the
/// conversion is affine in the prediction for fixed `(x_t, t)`.
pub fn guided_velocity<M: VelocityField + ?Sized>(
    model: &M,
    x_t: &Tensor,
    t: &Tensor,
    cond: Option<&Tensor>,
    scale: f64,
) -> Result<Tensor> {
    let v_cond = velocity(model, x_t, t, cond)?;
    if cond.is_none() || scale == 1.0 {
        return Ok(v_cond);
    }
    let v_uncond = velocity(model, x_t, t, None)?;
    Ok(v_uncond.add(&(v_cond.sub(&v_uncond)? * scale)?)?)
}

/// One `(x, eps, t, x_t, v)` training tuple.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: Tensor,
    pub x_t: Tensor,
    pub v: Tensor,
}

impl FlowSample {
    pub fn new(x: Tensor, eps: Tensor, t: Tensor) -> Result<Self> {
        let x_t = forward_process(&x, &eps, &t)?;
        let v = velocity_target(&x, &eps)?;
        Ok(Self { x, eps, t, x_t, v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    /// Heun predictor-corrector with trapezoidal correction.
    SecondOrder,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "second_order" | "heun" => Ok(Solver::SecondOrder),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub solver: Solver,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            solver: Solver::SecondOrder,
            cfg_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!(
                "cfg scale {} must be >= 0",
                self.cfg_scale
            )));
        }
        Ok(())
    }
}

/// Initial noise for a given seed.
pub fn initial_noise(
    seed: u64,
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    gaussian(&mut seeded_rng(seed), shape, dtype, device)
}

/// Integrates from `t = 0` to `t = 1` starting at `noise`. `observe` sees every
/// conditional-guided velocity evaluation as `(step, t, v)`. The state is
/// detached after every step, so no gradient flows through the trajectory.
pub fn sample_from<M: VelocityField + ?Sized>(
    model: &M,
    cond: Option<&Tensor>,
    noise: &Tensor,
    config: &SamplerConfig,
    mut observe: impl FnMut(usize, f64, &Tensor),
) -> Result<Tensor> {
    config.validate()?;
    let b = noise.dim(0)?;
    let (dtype, device) = (noise.dtype(), noise.device().clone());
    let dt = 1.0 / config.steps as f64;
    let mut x = noise.clone();
    for i in 0..config.steps {
        let t0 = i as f64 * dt;
        let t1 = (i + 1) as f64 * dt;
        let tv0 = time_vector(t0, b, dtype, &device)?;
        let v0 = guided_velocity(model, &x, &tv0, cond, config.cfg_scale)?;
        observe(i, t0, &v0);
        x = match config.solver {
            Solver::Euler => x.add(&(v0 * dt)?)?,
            Solver::SecondOrder => {
                let x_pred = x.add(&(&v0 * dt)?)?;
                let tv1 = time_vector(t1, b, dtype, &device)?;
                let v1 = guided_velocity(model, &x_pred, &tv1, cond, config.cfg_scale)?;
                x.add(&(v0.add(&v1)? * (0.5 * dt))?)?
            }
        }
        .detach();
    }
    Ok(x)
}

pub fn sample<M: VelocityField + ?Sized>(
    model: &M,
    cond: Option<&Tensor>,
    shape: &[usize],
    config: &SamplerConfig,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    config.validate()?;
    let noise = initial_noise(config.seed, shape, dtype, device)?;
    sample_from(model, cond, &noise, config, |_, _, _| {})
}

/// `eps + v(eps, 0)`, the single Euler step from pure noise.
pub fn one_step_sample<M: VelocityField + ?Sized>(
    model: &M,
    cond: Option<&Tensor>,
    noise: &Tensor,
    cfg_scale: f64,
) -> Result<Tensor> {
    let t = time_vector(0.0, noise.dim(0)?, noise.dtype(), noise.device())?;
    let v = guided_velocity(model, noise, &t, cond, cfg_scale)?;
    Ok(noise.add(&(v * 1.0)?)?)
}
