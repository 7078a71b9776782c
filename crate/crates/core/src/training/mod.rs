//! Unified rectified-flow training: timestep sampling, losses, the
//! optimisation step and the progressive stage recipe.

mod losses;
mod runlog;
mod stage;
pub(crate) mod trainer;

pub use losses::{compute_losses, repa_loss, rf_loss, sample_timesteps, LossTerms};
pub use runlog::{RunLog, RunRecord};
pub use stage::{run_stage, stage_checkpoint_name, StageRecipe, StageRun, StageSpec};
pub use trainer::Trainer;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LowResPretrain,
    HighResPretrain,
    UnifiedPostTrain,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::LowResPretrain => "low_res_pretrain",
            Stage::HighResPretrain => "high_res_pretrain",
            Stage::UnifiedPostTrain => "unified_post_train",
        }
    }

    pub fn needs_checkpoint(&self) -> bool {
        !matches!(self, Stage::LowResPretrain)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_res_pretrain" => Ok(Stage::LowResPretrain),
            "high_res_pretrain" => Ok(Stage::HighResPretrain),
            "unified_post_train" => Ok(Stage::UnifiedPostTrain),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fraction of samples drawn with `t` in `(0, 1)`; the rest use `t = 0`.
    pub alpha_flow_fraction: f64,
    /// Weight of the representation-alignment term.
    pub lambda_repa: f64,
    /// Weight of the commitment term.
    pub beta_commit: f64,
    /// Weight of the auxiliary-head term.
    pub gamma_aux: f64,
    pub uncond_dropout_p: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub stage: Stage,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_flow_fraction: 0.9,
            lambda_repa: 0.5,
            beta_commit: 0.25,
            gamma_aux: 1.0,
            uncond_dropout_p: 0.1,
            lr: 1e-4,
            batch_size: 16,
            steps: 1000,
            stage: Stage::LowResPretrain,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        unit("alpha_flow_fraction", self.alpha_flow_fraction)?;
        unit("uncond_dropout_p", self.uncond_dropout_p)?;
        for (name, v) in [
            ("lambda_repa", self.lambda_repa),
            ("beta_commit", self.beta_commit),
            ("gamma_aux", self.gamma_aux),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a finite non-negative number"
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rf: f64,
    pub repa: f64,
    pub commit: f64,
    pub aux: f64,
    pub total: f64,
    /// No feature extractor was available, so `repa` is 0 and excluded.
    pub repa_skipped: bool,
    pub aux_feature_skipped: bool,
}

impl LossReport {
    /// `rf + λ·repa + β·commit + γ·aux`.
    pub fn recombine(&self, cfg: &TrainConfig) -> f64 {
        self.rf
            + cfg.lambda_repa * self.repa
            + cfg.beta_commit * self.commit
            + cfg.gamma_aux * self.aux
    }

    pub fn is_finite(&self) -> bool {
        [self.rf, self.repa, self.commit, self.aux, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lambda_repa, c.beta_commit, c.gamma_aux),
            (0.5, 0.25, 1.0)
        );
        c.validate().unwrap();
        let bad = TrainConfig {
            lambda_repa: -0.1,
            ..c.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            alpha_flow_fraction: 1.5,
            ..c
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_names() {
        for s in [
            Stage::LowResPretrain,
            Stage::HighResPretrain,
            Stage::UnifiedPostTrain,
        ] {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("warmup".parse::<Stage>().is_err());
    }

    use std::sync::Arc;

    use candle_core::{DType, Device};

    use crate::config::ModelConfig;
    use crate::data::Dataset;
    use crate::extractor::{FeatureExtractor, RandomConvExtractor};
    use crate::model::CodModel;
    use crate::nn::{gaussian, seeded_rng};

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk(32, 16, 32);
        c.conditioner.base_channels = 4;
        c.conditioner.max_channel_mult = 2;
        c
    }

    #[test]
    fn timestep_mass_at_zero() {
        let mut rng = seeded_rng(5);
        let t = sample_timesteps(10_000, 0.9, &mut rng);
        let zeros = t.iter().filter(|v| **v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.1).abs() < 0.015, "{zeros}");
        assert!(t.iter().all(|v| (0.0..1.0).contains(v)));
        let all = sample_timesteps(1000, 1.0, &mut rng);
        assert!(all.iter().all(|v| *v > 0.0));
        let none = sample_timesteps(1000, 0.0, &mut rng);
        assert!(none.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_is_weighted_sum() {
        let dev = Device::Cpu;
        let model = CodModel::new(&tiny(), 1, DType::F32, &dev).unwrap();
        let ex = RandomConvExtractor::with_dim(16, DType::F32, &dev).unwrap();
        let x = Dataset::synthetic(4, 32, 2).all(DType::F32, &dev).unwrap();
        let cfg = TrainConfig::default();
        let (_, with) = compute_losses(&model, Some(&ex), &x, &cfg, 3).unwrap();
        assert!(!with.repa_skipped);
        assert!((with.recombine(&cfg) - with.total).abs() <= 1e-6 * with.total.abs().max(1.0));
        let (_, without) = compute_losses(&model, None, &x, &cfg, 3).unwrap();
        assert!(without.repa_skipped && without.aux_feature_skipped);
        assert_eq!(without.repa, 0.0);
        assert!(
            (without.recombine(&cfg) - without.total).abs() <= 1e-6 * without.total.abs().max(1.0)
        );
    }

    #[test]
    fn full_dropout_ignores_condition() {
        let dev = Device::Cpu;
        let c = tiny();
        let model = CodModel::new(&c, 1, DType::F32, &dev).unwrap();
        let mut rng = seeded_rng(0);
        let (rows, cols) = crate::network::token_grid(&c);
        let c1 = gaussian(&mut rng, &[2, 16, rows, cols], DType::F32, &dev).unwrap();
        let c2 = gaussian(&mut rng, &[2, 16, rows, cols], DType::F32, &dev).unwrap();
        let keep = candle_core::Tensor::zeros(2, DType::F32, &dev).unwrap();
        let a = model.denoiser.drop_condition(&c1, &keep).unwrap();
        let b = model.denoiser.drop_condition(&c2, &keep).unwrap();
        let d = a
            .sub(&b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn overfits_one_batch() {
        let dev = Device::Cpu;
        let model = CodModel::new(&tiny(), 2, DType::F32, &dev).unwrap();
        let ex: Arc<dyn FeatureExtractor> =
            Arc::new(RandomConvExtractor::with_dim(16, DType::F32, &dev).unwrap());
        let x = Dataset::synthetic(4, 32, 3).all(DType::F32, &dev).unwrap();
        let cfg = TrainConfig {
            lr: 2e-3,
            batch_size: 4,
            uncond_dropout_p: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::new(&model, cfg.clone(), Some(ex.clone()), |_| true).unwrap();
        let probe = |m: &CodModel| {
            compute_losses(m, Some(ex.as_ref()), &x, &cfg, 99)
                .unwrap()
                .1
                .total
        };
        let before = probe(&model);
        for _ in 0..40 {
            tr.step(&model, &x).unwrap();
        }
        let after = probe(&model);
        assert!(after < before, "{before} -> {after}");
        assert!(model.is_trained().unwrap());
    }

    #[test]
    fn recipe_keeps_budget_and_needs_checkpoints() {
        let base = tiny();
        let recipe = StageRecipe::desk(1e-3, [1, 1, 1]);
        let bits: Vec<u64> = recipe
            .stages
            .iter()
            .map(|s| s.total_bits(&base).unwrap())
            .collect();
        assert!(bits.windows(2).all(|w| w[0] == w[1]), "{bits:?}");
        let last = recipe.get(Stage::UnifiedPostTrain).unwrap();
        assert!(last.alpha_flow_fraction < 1.0);
        assert_eq!(
            recipe
                .get(Stage::LowResPretrain)
                .unwrap()
                .alpha_flow_fraction,
            1.0
        );
        let reference = StageRecipe::reference();
        assert_eq!(reference.stages[0].size, 256);
        assert_eq!(reference.stages[1].size, 512);
        assert_eq!(reference.stages[1].total_bits(&base).unwrap(), 1024);

        let dir = tempfile::tempdir().unwrap();
        let data = Dataset::synthetic(4, 64, 0);
        let run = StageRun {
            spec: recipe.get(Stage::HighResPretrain).unwrap().clone(),
            model: base,
            train: TrainConfig {
                batch_size: 2,
                ..Default::default()
            },
            data: &data,
            extractor: None,
            latent: None,
            init: None,
            out: dir.path().join("x.safetensors"),
            log: None,
            dtype: DType::F32,
            device: Device::Cpu,
        };
        assert!(matches!(run_stage(run), Err(Error::Config(_))));
    }

    #[test]
    fn stage_chain_writes_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = StageRecipe::desk(1e-3, [2, 2, 2]);
        let small = Dataset::synthetic(4, 32, 0);
        let big = Dataset::synthetic(4, 64, 0);
        let mut prev = None;
        for stage in [Stage::LowResPretrain, Stage::HighResPretrain] {
            let out = stage_checkpoint_name(dir.path(), stage);
            let run = StageRun {
                spec: recipe.get(stage).unwrap().clone(),
                model: tiny(),
                train: TrainConfig {
                    batch_size: 2,
                    ..Default::default()
                },
                data: if stage == Stage::LowResPretrain {
                    &small
                } else {
                    &big
                },
                extractor: None,
                latent: None,
                init: prev.clone(),
                out: out.clone(),
                log: None,
                dtype: DType::F32,
                device: Device::Cpu,
            };
            run_stage(run).unwrap();
            prev = Some(out);
        }
        let (m, meta) = CodModel::load(prev.as_ref().unwrap(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(meta.stage.as_deref(), Some("high_res_pretrain"));
        assert_eq!(meta.provenance.len(), 1);
        assert_eq!(m.config.codec.downsample_factor, 32);
    }
}
