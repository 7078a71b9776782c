//! A complete codec model: conditioner and denoiser sharing one parameter store.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::{self, CheckpointMeta};
use crate::conditioner::Conditioner;
use crate::config::{ModelConfig, Space};
use crate::error::{Error, Result};
use crate::latent::{Autoencoder, LatentAdapter};
use crate::network::Denoiser;
use crate::nn::ParamStore;

pub const CONDITIONER_PREFIX: &str = "conditioner";
pub const DENOISER_PREFIX: &str = "denoiser";
const LATENT_PREFIX: &str = "latent_adapter";
const LATENT_KEY: &str = "latent_channels";

#[derive(Debug, Clone)]
pub struct CodModel {
    pub config: ModelConfig,
    pub store: Arc<ParamStore>,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub latent: Option<Arc<LatentAdapter>>,
    adapter_rank: Option<usize>,
}

impl CodModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_store(config, Arc::new(ParamStore::new(seed, dtype, device)), None)
    }

    /// Builds the modules over `store`, reusing any parameters already present.
    pub fn from_store(
        config: &ModelConfig,
        store: Arc<ParamStore>,
        adapter_rank: Option<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let conditioner = Conditioner::new(&store, CONDITIONER_PREFIX, config)?;
        let mut denoiser = Denoiser::new(&store.root().pp(DENOISER_PREFIX), config)?;
        if let Some(r) = adapter_rank {
            denoiser.attach_adapters(&store, r)?;
        }
        Ok(Self {
            config: config.clone(),
            store,
            conditioner,
            denoiser,
            latent: None,
            adapter_rank,
        })
    }

    pub fn with_latent(mut self, adapter: Arc<LatentAdapter>) -> Result<Self> {
        if adapter.channels() != self.config.denoiser.latent_channels {
            return Err(Error::Config(format!(
                "adapter has {} channels, model expects {}",
                adapter.channels(),
                self.config.denoiser.latent_channels
            )));
        }
        self.latent = Some(adapter);
        Ok(self)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn adapter_rank(&self) -> Option<usize> {
        self.adapter_rank
    }

    pub fn attach_adapters(&mut self, rank: usize) -> Result<()> {
        if self.adapter_rank.is_some() {
            return Err(Error::State("adapters already attached".into()));
        }
        self.denoiser.attach_adapters(&self.store, rank)?;
        self.adapter_rank = Some(rank);
        Ok(())
    }

    fn autoencoder(&self) -> Result<&dyn Autoencoder> {
        match (self.config.codec.space, &self.latent) {
            (Space::Pixel, _) => Ok(&crate::latent::IdentityAdapter),
            (Space::Latent, Some(a)) => Ok(a.as_ref()),
            (Space::Latent, None) => Err(Error::State("latent-space model has no adapter".into())),
        }
    }

    /// Clean samples in the denoiser's space; latents carry no gradient.
    pub fn to_sample(&self, images: &Tensor) -> Result<Tensor> {
        match self.config.codec.space {
            Space::Pixel => Ok(images.clone()),
            Space::Latent => Ok(self.autoencoder()?.encode(images)?.detach()),
        }
    }

    pub fn to_image(&self, sample: &Tensor) -> Result<Tensor> {
        self.autoencoder()?.decode(sample)
    }

    pub fn sample_shape(&self, batch: usize) -> [usize; 4] {
        let (c, h, w) = self
            .config
            .codec
            .sample_dims(self.config.denoiser.latent_channels);
        [batch, c, h, w]
    }

    /// Whether the codebook has seen data.
    pub fn is_trained(&self) -> Result<bool> {
        self.conditioner.codebook.is_initialized()
    }

    /// Independent copy with its own store.
    pub fn duplicate(&self) -> Result<Self> {
        let store = Arc::new(ParamStore::new(0, self.dtype(), self.device()));
        let copies = self
            .store
            .tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.copy()?)))
            .collect::<Result<_>>()?;
        store.load(&copies)?;
        let mut m = Self::from_store(&self.config, store, self.adapter_rank)?;
        m.latent = self.latent.clone();
        Ok(m)
    }

    pub fn checksum(&self) -> Result<f64> {
        self.store.checksum(|_| true)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let mut meta = CheckpointMeta::new("cod", Some(self.config.clone()));
        if let Some(r) = self.adapter_rank {
            meta.extra.insert("adapter_rank".into(), r.to_string());
        }
        meta
    }

    /// Writes weights, plus the latent adapter's when present, in one file.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<String> {
        let mut meta = meta.clone();
        meta.model = Some(self.config.clone());
        match self.adapter_rank {
            Some(r) => meta.extra.insert("adapter_rank".into(), r.to_string()),
            None => meta.extra.remove("adapter_rank"),
        };
        let mut tensors = self.store.tensors();
        match &self.latent {
            Some(a) => {
                meta.extra
                    .insert(LATENT_KEY.into(), a.channels().to_string());
                tensors.extend(a.store.tensors());
            }
            None => {
                meta.extra.remove(LATENT_KEY);
            }
        }
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let ck = checkpoint::load(path, device)?;
        if ck.meta.kind != "cod" {
            return Err(Error::Format(format!(
                "checkpoint holds {}, not a codec model",
                ck.meta.kind
            )));
        }
        let config = ck
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::Format("checkpoint lacks a model configuration".into()))?;
        let rank = match ck.meta.extra.get("adapter_rank") {
            Some(r) => Some(
                r.parse()
                    .map_err(|_| Error::Format(format!("bad adapter rank {r}")))?,
            ),
            None => None,
        };
        let (adapter_tensors, tensors): (BTreeMap<_, _>, BTreeMap<_, _>) = ck
            .tensors
            .into_iter()
            .partition(|(k, _)| k.starts_with(LATENT_PREFIX));
        let store = Arc::new(ParamStore::new(0, dtype, device));
        store.load(&tensors)?;
        let mut model = Self::from_store(&config, store, rank)?;
        let expected = model.store.tensors().len();
        if expected != tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model defines {expected}",
                tensors.len()
            )));
        }
        if let Some(ch) = ck.meta.extra.get(LATENT_KEY) {
            let ch: usize = ch
                .parse()
                .map_err(|_| Error::Format(format!("bad latent channel count {ch}")))?;
            let astore = Arc::new(ParamStore::new(0, dtype, device));
            astore.load(&adapter_tensors)?;
            let adapter = LatentAdapter::new(astore, ch)?;
            if adapter.store.tensors().len() != adapter_tensors.len() {
                return Err(Error::Format(
                    "latent adapter tensors do not match its layout".into(),
                ));
            }
            model = model.with_latent(Arc::new(adapter))?;
        }
        Ok((model, ck.meta))
    }
}
