use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;
use crate::extractor::FeatureExtractor;
use crate::model::CodModel;

use super::losses::{check_finite, compute_losses};
use super::runlog::{RunLog, RunRecord};
use super::{LossReport, TrainConfig};

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub(crate) fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * s)?);
            }
        }
    }
    Ok(norm)
}

/// Owns the optimiser state for one training stream over a [`CodModel`].
pub struct Trainer {
    pub config: TrainConfig,
    opt: AdamW,
    vars: Vec<Var>,
    step: u64,
    extractor: Option<Arc<dyn FeatureExtractor>>,
    log: Option<RunLog>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("step", &self.step)
            .finish()
    }
}

impl Trainer {
    /// Trains every parameter whose name satisfies `trainable`.
    pub fn new(
        model: &CodModel,
        config: TrainConfig,
        extractor: Option<Arc<dyn FeatureExtractor>>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        config.validate()?;
        let vars: Vec<Var> = model
            .store
            .vars_where(trainable)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: config.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            config,
            opt,
            vars,
            step: 0,
            extractor,
            log: None,
        })
    }

    pub fn with_log(mut self, log: RunLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.opt.set_learning_rate(lr);
    }

    fn seed(&self) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.step.wrapping_add(1)
    }

    /// One optimiser update on `images`, followed by the codebook update.
    pub fn step(&mut self, model: &CodModel, images: &Tensor) -> Result<LossReport> {
        let seed = self.seed();
        let (terms, report) =
            compute_losses(model, self.extractor.as_deref(), images, &self.config, seed)?;
        check_finite(&report, self.step)?;
        let mut grads = terms.total.backward()?;
        clip_gradients(&mut grads, &self.vars, self.config.grad_clip)?;
        self.opt.step(&grads)?;
        model.conditioner.codebook.update(
            &terms.condition.z_e,
            &terms.condition.quantized.grids,
            seed,
        )?;
        if let Some(log) = &mut self.log {
            log.append(&RunRecord {
                step: self.step,
                model: "cod".into(),
                lr: self.config.lr,
                losses: serde_json::to_value(report)?,
            })?;
        }
        self.step += 1;
        Ok(report)
    }
}
