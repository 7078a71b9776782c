use std::sync::Arc;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::conditioner::ConditionOutput;
use crate::config::{CodecPreset, PredictionTarget};
use crate::error::{Error, Result};
use crate::extractor::{feature_distance, FeatureExtractor};
use crate::flow::{forward_process, time_vector, velocity_target, x_to_v};
use crate::model::{CodModel, CONDITIONER_PREFIX};
use crate::nn::{gaussian, mse, scalar, seeded_rng, ParamStore};
use crate::training::trainer::clip_gradients;
use crate::training::{repa_loss, sample_timesteps, RunLog, RunRecord};

use super::dmd::{dmd_direction, dmd_surrogate, DmdTimeRange, DmdWeighting, FrozenModel};
use super::gan::{hinge_discriminator_loss, hinge_generator_loss, PatchDiscriminator};

pub const STAGE_DISTILLED: &str = "one_step";
pub const STAGE_FINETUNE_ONE: &str = "finetune_adapters";
pub const STAGE_FINETUNE_TWO: &str = "finetune_full";
const DISC_PREFIX: &str = "discriminator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub l1_weight: f64,
    pub feature_weight: f64,
    pub dmd_weight: f64,
    pub gan_weight: f64,
    pub repa_weight: f64,
    pub commit_weight: f64,
    /// Updates per cycle; one goes to the generator, the rest to the fake
    /// score model and discriminator.
    pub ratio: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub real_cfg_scale: f64,
    pub weighting: DmdWeighting,
    pub t_min: f64,
    pub t_max: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            l1_weight: 1.0,
            feature_weight: 1.0,
            dmd_weight: 2.0,
            gan_weight: 0.01,
            repa_weight: 0.5,
            commit_weight: 0.25,
            ratio: 10,
            lr: 1e-5,
            critic_lr: 1e-5,
            real_cfg_scale: 1.0,
            weighting: DmdWeighting::MeanAbs,
            t_min: 0.02,
            t_max: 0.98,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1_weight", self.l1_weight),
            ("feature_weight", self.feature_weight),
            ("dmd_weight", self.dmd_weight),
            ("gan_weight", self.gan_weight),
            ("repa_weight", self.repa_weight),
            ("commit_weight", self.commit_weight),
            ("grad_clip", self.grad_clip),
            ("real_cfg_scale", self.real_cfg_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a finite non-negative number"
                )));
            }
        }
        for (name, v) in [("lr", self.lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if self.ratio == 0 {
            return Err(Error::Config("ratio must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0 < self.t_min && self.t_min <= self.t_max && self.t_max < 1.0) {
            return Err(Error::Config(format!(
                "DMD time range [{}, {}] must satisfy 0 < t_min <= t_max < 1",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Whether the distribution-matching or adversarial terms are active.
    pub fn uses_critics(&self) -> bool {
        self.dmd_weight > 0.0 || self.gan_weight > 0.0
    }

    pub fn times(&self) -> DmdTimeRange {
        DmdTimeRange {
            t_min: self.t_min,
            t_max: self.t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OneStepLossReport {
    pub l1: f64,
    pub feature: f64,
    pub dmd: f64,
    pub gan: f64,
    pub repa: f64,
    pub commit: f64,
    pub total: f64,
}

impl OneStepLossReport {
    pub fn recombine(&self, cfg: &DistillConfig) -> f64 {
        cfg.l1_weight * self.l1
            + cfg.feature_weight * self.feature
            + cfg.dmd_weight * self.dmd
            + cfg.gan_weight * self.gan
            + cfg.repa_weight * self.repa
            + cfg.commit_weight * self.commit
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.feature,
            self.dmd,
            self.gan,
            self.repa,
            self.commit,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Generator,
    Critic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub step: u64,
    pub turn: Turn,
    pub generator: Option<OneStepLossReport>,
    pub fake_score: Option<f64>,
    pub discriminator: Option<f64>,
}

/// One-step generator output for a batch.
#[derive(Debug, Clone)]
pub struct Generated {
    /// In the denoiser's sample space.
    pub sample: Tensor,
    pub image: Tensor,
    pub features: Tensor,
    pub condition: ConditionOutput,
}

/// `eps + v(eps, 0 | c(image))` with gradients to the generator.
pub fn generate(model: &CodModel, images: &Tensor, noise_seed: u64) -> Result<Generated> {
    let condition = model.conditioner.forward(images)?;
    let mut rng = seeded_rng(noise_seed);
    let shape = model.sample_shape(images.dim(0)?);
    let eps = gaussian(&mut rng, &shape, model.dtype(), model.device())?;
    let t = time_vector(0.0, shape[0], model.dtype(), model.device())?;
    let out = model.denoiser.forward(&eps, &t, Some(&condition.c))?;
    let v = match model.config.codec.prediction_target {
        PredictionTarget::V => out.prediction,
        PredictionTarget::X => x_to_v(&out.prediction, &eps, &t)?,
    };
    let sample = eps.add(&v)?;
    let image = model.to_image(&sample)?;
    Ok(Generated {
        sample,
        image,
        features: out.features,
        condition,
    })
}

struct Opt {
    inner: AdamW,
    vars: Vec<Var>,
}

impl Opt {
    fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let inner = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self { inner, vars })
    }

    fn step(&mut self, loss: &Tensor, clip: f64) -> Result<()> {
        let mut grads = loss.backward()?;
        clip_gradients(&mut grads, &self.vars, clip)?;
        self.inner.step(&grads)?;
        Ok(())
    }
}

/// Critics used by the distribution-matching and adversarial terms.
pub struct Critics {
    pub real: FrozenModel,
    pub fake: CodModel,
    fake_opt: Opt,
    pub disc: PatchDiscriminator,
    disc_store: Arc<ParamStore>,
    disc_opt: Opt,
}

impl Critics {
    /// Real and fake score models both start from `teacher`.
    pub fn new(teacher: &CodModel, cfg: &DistillConfig) -> Result<Self> {
        let real = FrozenModel::new(teacher)?;
        let fake = teacher.duplicate()?;
        let fake_vars = fake
            .store
            .vars_where(|n| n.starts_with("denoiser."))
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let fake_opt = Opt::new(fake_vars, cfg.critic_lr)?;
        let disc_store = Arc::new(ParamStore::new(
            cfg.seed ^ 0xD15C,
            teacher.dtype(),
            teacher.device(),
        ));
        let disc = PatchDiscriminator::new(&disc_store.root().pp(DISC_PREFIX))?;
        let disc_opt = Opt::new(disc_store.all_vars(), cfg.critic_lr)?;
        Ok(Self {
            real,
            fake,
            fake_opt,
            disc,
            disc_store,
            disc_opt,
        })
    }

    pub fn discriminator_store(&self) -> &Arc<ParamStore> {
        &self.disc_store
    }

    /// Conditioning from the frozen real model.
    pub fn real_condition(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.real.model.conditioner.forward(images)?.c.detach())
    }

    /// One flow-matching update of the fake score model on generator samples.
    pub fn fake_score_step(
        &mut self,
        samples: &Tensor,
        cond: &Tensor,
        seed: u64,
        clip: f64,
    ) -> Result<f64> {
        let x = samples.detach();
        let mut rng = seeded_rng(seed);
        let b = x.dim(0)?;
        let t = sample_timesteps(b, 1.0, &mut rng);
        let t = Tensor::from_vec(t, b, x.device())?.to_dtype(x.dtype())?;
        let eps = gaussian(&mut rng, x.dims(), x.dtype(), x.device())?;
        let x_t = forward_process(&x, &eps, &t)?;
        let out = self.fake.denoiser.forward(&x_t, &t, Some(&cond.detach()))?;
        let v = match self.fake.config.codec.prediction_target {
            PredictionTarget::V => out.prediction,
            PredictionTarget::X => x_to_v(&out.prediction, &x_t, &t)?,
        };
        let loss = mse(&v, &velocity_target(&x, &eps)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fake score loss {value}")));
        }
        self.fake_opt.step(&loss, clip)?;
        Ok(value)
    }

    pub fn discriminator_step(
        &mut self,
        real_images: &Tensor,
        fake_images: &Tensor,
        clip: f64,
    ) -> Result<f64> {
        let real = self.disc.forward(&real_images.detach())?;
        let fake = self.disc.forward(&fake_images.detach())?;
        let loss = hinge_discriminator_loss(&real, &fake)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss {value}")));
        }
        self.disc_opt.step(&loss, clip)?;
        Ok(value)
    }
}

/// One-step training state: the generator, its optimiser and optional critics.
pub struct DistillState {
    pub generator: CodModel,
    pub config: DistillConfig,
    pub critics: Option<Critics>,
    opt: Opt,
    extractor: Option<Arc<dyn FeatureExtractor>>,
    step: u64,
    log: Option<RunLog>,
    /// Stage tag written into checkpoints produced from this state.
    pub stage: &'static str,
}

impl std::fmt::Debug for DistillState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DistillState")
            .field("config", &self.config)
            .field("step", &self.step)
            .finish()
    }
}

impl DistillState {
    /// Distillation from a multi-step `teacher`; the generator starts as a copy.
    pub fn distill(
        teacher: &CodModel,
        config: DistillConfig,
        extractor: Option<Arc<dyn FeatureExtractor>>,
    ) -> Result<Self> {
        config.validate()?;
        if !teacher.is_trained()? {
            return Err(Error::State("teacher has not been trained".into()));
        }
        let generator = teacher.duplicate()?;
        let critics = if config.uses_critics() {
            Some(Critics::new(teacher, &config)?)
        } else {
            None
        };
        Self::assemble(
            generator,
            config,
            critics,
            extractor,
            |_| true,
            STAGE_DISTILLED,
        )
    }

    fn assemble(
        generator: CodModel,
        config: DistillConfig,
        critics: Option<Critics>,
        extractor: Option<Arc<dyn FeatureExtractor>>,
        trainable: impl Fn(&str) -> bool,
        stage: &'static str,
    ) -> Result<Self> {
        let vars = generator
            .store
            .vars_where(trainable)
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let opt = Opt::new(vars, config.lr)?;
        Ok(Self {
            generator,
            config,
            critics,
            opt,
            extractor,
            step: 0,
            log: None,
            stage,
        })
    }

    pub fn with_log(mut self, log: RunLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trainable_params(&self) -> usize {
        self.opt.vars.iter().map(|v| v.elem_count()).sum()
    }

    fn seed(&self, salt: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (self.step.wrapping_add(1) << 8)
            ^ salt
    }

    fn is_generator_turn(&self) -> bool {
        self.critics.is_none() || (self.step + 1).is_multiple_of(self.config.ratio as u64)
    }

    /// Generator loss terms for `images`; gradients reach only generator parameters.
    pub fn generator_loss(
        &self,
        images: &Tensor,
        seed: u64,
    ) -> Result<(Tensor, OneStepLossReport, Generated)> {
        let cfg = &self.config;
        let gen = generate(&self.generator, images, seed)?;
        let l1 = gen.image.sub(images)?.abs()?.mean_all()?;
        let zero = Tensor::zeros((), self.generator.dtype(), self.generator.device())?;
        let (feature, repa) = match &self.extractor {
            Some(e) => {
                let fd = feature_distance(e.as_ref(), &gen.image, images)?.mean_all()?;
                let target = e.dense(images)?.to_dtype(self.generator.dtype())?;
                (fd, repa_loss(&gen.features, &target)?)
            }
            None => (zero.clone(), zero.clone()),
        };
        let (dmd, gan) = match &self.critics {
            Some(c) => {
                c.real.verify()?;
                let dmd = if cfg.dmd_weight > 0.0 {
                    let cond = c.real_condition(images)?;
                    let mut rng = seeded_rng(seed ^ 0xD3D);
                    let g = dmd_direction(
                        &gen.sample,
                        Some(&cond),
                        &c.real.model.denoiser,
                        &c.fake.denoiser,
                        cfg.real_cfg_scale,
                        cfg.weighting,
                        &cfg.times(),
                        &mut rng,
                    )?;
                    dmd_surrogate(&gen.sample, &g)?
                } else {
                    zero.clone()
                };
                let gan = if cfg.gan_weight > 0.0 {
                    hinge_generator_loss(&c.disc.forward(&gen.image)?)?
                } else {
                    zero.clone()
                };
                (dmd, gan)
            }
            None => (zero.clone(), zero.clone()),
        };
        let commit = gen.condition.quantized.commitment.clone();
        let total = ((&l1 * cfg.l1_weight)?
            + (&feature * cfg.feature_weight)?
            + (&dmd * cfg.dmd_weight)?
            + (&gan * cfg.gan_weight)?
            + (&repa * cfg.repa_weight)?
            + (&commit * cfg.commit_weight)?)?;
        let report = OneStepLossReport {
            l1: scalar(&l1)?,
            feature: scalar(&feature)?,
            dmd: scalar(&dmd)?,
            gan: scalar(&gan)?,
            repa: scalar(&repa)?,
            commit: scalar(&commit)?,
            total: scalar(&total)?,
        };
        Ok((total, report, gen))
    }

    /// One update: the generator on its turn, otherwise the fake score model
    /// and discriminator on fresh generator samples.
    pub fn step(&mut self, images: &Tensor) -> Result<DistillReport> {
        let images = images.to_dtype(self.generator.dtype())?;
        let seed = self.seed(0);
        let report = if self.is_generator_turn() {
            let (total, losses, gen) = self.generator_loss(&images, seed)?;
            if !losses.is_finite() {
                return Err(Error::NonFinite(format!("step {}: {losses:?}", self.step)));
            }
            self.opt.step(&total, self.config.grad_clip)?;
            self.generator.conditioner.codebook.update(
                &gen.condition.z_e,
                &gen.condition.quantized.grids,
                seed,
            )?;
            DistillReport {
                step: self.step,
                turn: Turn::Generator,
                generator: Some(losses),
                fake_score: None,
                discriminator: None,
            }
        } else {
            let gen = generate(&self.generator, &images, seed)?;
            let clip = self.config.grad_clip;
            let gan_on = self.config.gan_weight > 0.0;
            let fake_seed = self.seed(1);
            let critics = self
                .critics
                .as_mut()
                .ok_or_else(|| Error::State("no critics".into()))?;
            let cond = critics.real_condition(&images)?;
            let fake = critics.fake_score_step(&gen.sample, &cond, fake_seed, clip)?;
            let disc = if gan_on {
                Some(critics.discriminator_step(&images, &gen.image, clip)?)
            } else {
                None
            };
            DistillReport {
                step: self.step,
                turn: Turn::Critic,
                generator: None,
                fake_score: Some(fake),
                discriminator: disc,
            }
        };
        if let Some(log) = &mut self.log {
            log.append(&RunRecord {
                step: self.step,
                model: "one_step".into(),
                lr: self.config.lr,
                losses: serde_json::to_value(report)?,
            })?;
        }
        self.step += 1;
        Ok(report)
    }
}

/// Which half of the two-stage bitrate adaptation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStage {
    /// Fresh conditioner plus low-rank adapters on the denoiser; no critics.
    Adapters,
    /// Everything trainable, critics enabled, lower learning rate.
    Full,
}

impl FinetuneStage {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Adapters => STAGE_FINETUNE_ONE,
            Self::Full => STAGE_FINETUNE_TWO,
        }
    }
}

impl std::str::FromStr for FinetuneStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapters" | "1" | "one" => Ok(Self::Adapters),
            "full" | "2" | "two" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown finetune stage {other:?}"))),
        }
    }
}

/// First adaptation stage: a new conditioner for `preset` over the one-step
/// denoiser of `base`, which receives rank-`rank` adapters.
pub fn finetune_adapters(
    base: &CodModel,
    base_stage: Option<&str>,
    preset: &CodecPreset,
    rank: usize,
    mut config: DistillConfig,
    extractor: Option<Arc<dyn FeatureExtractor>>,
) -> Result<DistillState> {
    if base_stage != Some(STAGE_DISTILLED) {
        return Err(Error::State(format!(
            "adapter finetuning starts from a distilled one-step model, got stage {base_stage:?}"
        )));
    }
    if rank == 0 {
        return Err(Error::Config("adapter rank must be positive".into()));
    }
    let mut model_cfg = base.config.clone();
    model_cfg.codec = model_cfg.codec.with_preset(preset);
    model_cfg.validate()?;
    config.dmd_weight = 0.0;
    config.gan_weight = 0.0;
    config.validate()?;
    let store = Arc::new(ParamStore::new(config.seed, base.dtype(), base.device()));
    let denoiser_only = base
        .store
        .tensors()
        .into_iter()
        .filter(|(k, _)| {
            !k.starts_with(CONDITIONER_PREFIX)
                && !k.contains(&format!("buffer:{CONDITIONER_PREFIX}"))
        })
        .map(|(k, t)| Ok((k, t.copy()?)))
        .collect::<Result<_>>()?;
    store.load(&denoiser_only)?;
    let mut generator = CodModel::from_store(&model_cfg, store, base.adapter_rank())?;
    generator.latent = base.latent.clone();
    if generator.adapter_rank().is_none() {
        generator.attach_adapters(rank)?;
    }
    DistillState::assemble(
        generator,
        config,
        None,
        extractor,
        |n| n.starts_with(CONDITIONER_PREFIX) || n.contains("lora_"),
        STAGE_FINETUNE_ONE,
    )
}

/// Second adaptation stage: all parameters of the first-stage model trained
/// with critics initialised from `teacher`.
pub fn finetune_full(
    stage_one: &CodModel,
    stage_one_tag: Option<&str>,
    teacher: &CodModel,
    config: DistillConfig,
    extractor: Option<Arc<dyn FeatureExtractor>>,
) -> Result<DistillState> {
    if stage_one_tag != Some(STAGE_FINETUNE_ONE) {
        return Err(Error::State(format!(
            "full finetuning requires the adapter stage first, got stage {stage_one_tag:?}"
        )));
    }
    config.validate()?;
    if !stage_one.is_trained()? {
        return Err(Error::State(
            "adapter-stage model has not been trained".into(),
        ));
    }
    let generator = stage_one.duplicate()?;
    let critics = if config.uses_critics() {
        Some(Critics::new(teacher, &config)?)
    } else {
        None
    };
    DistillState::assemble(
        generator,
        config,
        critics,
        extractor,
        |_| true,
        STAGE_FINETUNE_TWO,
    )
}
