use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{ModelConfig, Space};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::latent::LatentAdapter;
use crate::model::CodModel;
use crate::nn::ParamStore;
use crate::rate::compute_rate;

use super::runlog::RunLog;
use super::trainer::Trainer;
use super::{LossReport, Stage, TrainConfig};

/// One row of the progressive recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub size: usize,
    pub downsample_factor: usize,
    pub codebook_size: usize,
    pub alpha_flow_fraction: f64,
    pub lr: f64,
    pub steps: usize,
}

impl StageSpec {
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.codec.height = self.size;
        m.codec.width = self.size;
        m.codec.downsample_factor = self.downsample_factor;
        m.codec.codebook_size = self.codebook_size;
        m
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            alpha_flow_fraction: self.alpha_flow_fraction,
            lr: self.lr,
            steps: self.steps,
            stage: self.stage,
            ..base.clone()
        }
    }

    pub fn total_bits(&self, base: &ModelConfig) -> Result<u64> {
        Ok(compute_rate(&self.model_config(base).codec)?.total_bits)
    }
}

/// The three-stage schedule: low-resolution pretraining, high-resolution
/// pretraining with doubled downsampling, then unified post-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub stages: Vec<StageSpec>,
}

impl StageRecipe {
    /// Full-size schedule: 256 px at f = 16, then 512 px at f = 32.
    pub fn reference() -> Self {
        Self::scaled(256, 1e-4, 2e-5, [400_000, 100_000, 100_000])
    }

    /// Desk-size schedule: 32 px at f = 16, then 64 px at f = 32.
    pub fn desk(lr: f64, steps: [usize; 3]) -> Self {
        Self::scaled(32, lr, lr / 5.0, steps)
    }

    /// The schedule starting at `size` px; later stages use `lr_post`.
    pub fn scaled(size: usize, lr_pre: f64, lr_post: f64, steps: [usize; 3]) -> Self {
        let row = |stage, size, f, alpha, lr, steps| StageSpec {
            stage,
            size,
            downsample_factor: f,
            codebook_size: 16,
            alpha_flow_fraction: alpha,
            lr,
            steps,
        };
        Self {
            stages: vec![
                row(Stage::LowResPretrain, size, 16, 1.0, lr_pre, steps[0]),
                row(Stage::HighResPretrain, 2 * size, 32, 1.0, lr_post, steps[1]),
                row(
                    Stage::UnifiedPostTrain,
                    2 * size,
                    32,
                    0.9,
                    lr_post,
                    steps[2],
                ),
            ],
        }
    }

    pub fn get(&self, stage: Stage) -> Result<&StageSpec> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::Config(format!("recipe has no {} stage", stage.as_str())))
    }
}

/// Inputs of one stage run.
pub struct StageRun<'a> {
    pub spec: StageSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: &'a Dataset,
    pub extractor: Option<Arc<dyn FeatureExtractor>>,
    /// Autoencoder of a latent-space model; taken from `init` when absent.
    pub latent: Option<Arc<LatentAdapter>>,
    /// Previous stage's checkpoint; required for every stage after the first.
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub dtype: DType,
    pub device: Device,
}

/// Trains one stage and writes its checkpoint atomically.
pub fn run_stage(run: StageRun<'_>) -> Result<(CodModel, LossReport, String)> {
    let spec = &run.spec;
    let model_cfg = spec.model_config(&run.model);
    let train_cfg = spec.train_config(&run.train);
    model_cfg.validate()?;
    train_cfg.validate()?;
    if run.data.dims() != (spec.size, spec.size) {
        return Err(Error::Config(format!(
            "dataset is {:?}, stage {} trains at {}",
            run.data.dims(),
            spec.stage.as_str(),
            spec.size
        )));
    }
    let store = Arc::new(ParamStore::new(train_cfg.seed, run.dtype, &run.device));
    let mut provenance = Vec::new();
    let mut model = CodModel::from_store(&model_cfg, store, None)?;
    if model_cfg.codec.space == Space::Latent {
        let adapter = match (&run.latent, &run.init) {
            (Some(a), _) => a.clone(),
            (None, Some(p)) => CodModel::load(p, run.dtype, &run.device)?
                .0
                .latent
                .ok_or_else(|| Error::Config("initial checkpoint has no latent adapter".into()))?,
            (None, None) => {
                return Err(Error::Config(
                    "latent-space training needs an autoencoder".into(),
                ))
            }
        };
        model = model.with_latent(adapter)?;
    }
    match (&run.init, spec.stage.needs_checkpoint()) {
        (None, true) => {
            return Err(Error::Config(format!(
                "stage {} needs the previous stage's checkpoint",
                spec.stage.as_str()
            )))
        }
        (Some(path), _) => {
            let ck = checkpoint::load(path, &run.device)?;
            model.store.load_matching(&ck.tensors)?;
            provenance = ck.meta.provenance.clone();
            provenance.push(checkpoint::file_hash(path)?);
        }
        (None, false) => {}
    }
    let mut trainer = Trainer::new(&model, train_cfg.clone(), run.extractor.clone(), |_| true)?;
    if let Some(p) = &run.log {
        trainer = trainer.with_log(RunLog::create(p)?);
    }
    let mut sampler = BatchSampler::new(run.data.len(), train_cfg.batch_size, train_cfg.seed)?;
    let mut last = None;
    for _ in 0..train_cfg.steps {
        let x = run
            .data
            .batch(&sampler.next_indices(), run.dtype, &run.device)?;
        last = Some(trainer.step(&model, &x)?);
    }
    let report = last.ok_or_else(|| Error::Config("stage has zero steps".into()))?;
    let mut meta = CheckpointMeta::new("cod", Some(model_cfg));
    meta.train = Some(serde_json::to_value(&train_cfg)?);
    meta.stage = Some(spec.stage.as_str().into());
    meta.provenance = provenance;
    meta.step = train_cfg.steps as u64;
    meta.extra.insert("dataset".into(), run.data.content_hash());
    let hash = model.save(&run.out, &meta)?;
    Ok((model, report, hash))
}

pub fn stage_checkpoint_name(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.safetensors", stage.as_str()))
}
