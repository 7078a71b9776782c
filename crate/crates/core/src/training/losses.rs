use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioner::{aux_loss, AuxLoss, ConditionOutput};
use crate::config::PredictionTarget;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::flow::{forward_process, velocity_target, x_to_v};
use crate::model::CodModel;
use crate::nn::{cosine_distance, gaussian, mse, scalar, seeded_rng};

use super::{LossReport, TrainConfig};

/// With probability `fraction`, `t = sigmoid(s)` with `s ~ N(0, 1)`; otherwise `t = 0`.
pub fn sample_timesteps(batch: usize, fraction: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..batch)
        .map(|_| {
            if rng.random::<f64>() < fraction {
                let s: f64 = rng.sample(StandardNormal);
                1.0 / (1.0 + (-s).exp())
            } else {
                0.0
            }
        })
        .collect()
}

pub fn rf_loss(v_pred: &Tensor, v_target: &Tensor) -> Result<Tensor> {
    mse(v_pred, v_target)
}

/// `1 - mean cosine` between `(B, D, h, w)` feature maps over positions.
pub fn repa_loss(features: &Tensor, target: &Tensor) -> Result<Tensor> {
    cosine_distance(features, &target.detach(), 1)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub rf: Tensor,
    pub repa: Option<Tensor>,
    pub commit: Tensor,
    pub aux: AuxLoss,
    pub total: Tensor,
    pub condition: ConditionOutput,
    pub t: Vec<f64>,
}

/// All loss terms for one batch. Randomness (timesteps, dropout, noise) is a
/// pure function of `seed`, so the result is deterministic given the weights.
pub fn compute_losses(
    model: &CodModel,
    extractor: Option<&dyn FeatureExtractor>,
    images: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossTerms, LossReport)> {
    let dtype = model.dtype();
    let dev = model.device().clone();
    let images = images.to_dtype(dtype)?;
    let b = images.dim(0)?;
    let mut rng = seeded_rng(seed);
    let t = sample_timesteps(b, cfg.alpha_flow_fraction, &mut rng);
    let keep: Vec<f64> = (0..b)
        .map(|_| {
            if rng.random::<f64>() < cfg.uncond_dropout_p {
                0.0
            } else {
                1.0
            }
        })
        .collect();

    let condition = model.conditioner.forward(&images)?;
    let x = model.to_sample(&images)?;
    let eps = gaussian(&mut rng, x.dims(), dtype, &dev)?;
    let t_vec = Tensor::from_vec(t.clone(), b, &dev)?.to_dtype(dtype)?;
    let x_t = forward_process(&x, &eps, &t_vec)?;
    let keep = Tensor::from_vec(keep, b, &dev)?.to_dtype(dtype)?;
    let c = model.denoiser.drop_condition(&condition.c, &keep)?;
    let out = model.denoiser.forward(&x_t, &t_vec, Some(&c))?;
    let v_pred = match model.config.codec.prediction_target {
        PredictionTarget::V => out.prediction,
        PredictionTarget::X => x_to_v(&out.prediction, &x_t, &t_vec)?,
    };
    let rf = rf_loss(&v_pred, &velocity_target(&x, &eps)?)?;

    let target = match extractor {
        Some(e) => Some(e.dense(&images)?.to_dtype(dtype)?.detach()),
        None => None,
    };
    let repa = match &target {
        Some(f) => Some(repa_loss(&out.features, f)?),
        None => None,
    };
    let aux_pred = model.conditioner.aux(&condition.c)?;
    let aux = aux_loss(&aux_pred, &images, target.as_ref())?;
    let commit = condition.quantized.commitment.clone();

    let mut total = rf.clone();
    if let Some(r) = &repa {
        total = total.add(&(r * cfg.lambda_repa)?)?;
    }
    total = total.add(&(&commit * cfg.beta_commit)?)?;
    total = total.add(&(&aux.total * cfg.gamma_aux)?)?;

    let report = LossReport {
        rf: scalar(&rf)?,
        repa: match &repa {
            Some(r) => scalar(r)?,
            None => 0.0,
        },
        commit: scalar(&commit)?,
        aux: scalar(&aux.total)?,
        total: scalar(&total)?,
        repa_skipped: repa.is_none(),
        aux_feature_skipped: aux.feature_skipped,
    };
    Ok((
        LossTerms {
            rf,
            repa,
            commit,
            aux,
            total,
            condition,
            t,
        },
        report,
    ))
}

pub(crate) fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    if report.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "step {step}: rf={} repa={} commit={} aux={} total={}",
        report.rf, report.repa, report.commit, report.aux, report.total
    )))
}
