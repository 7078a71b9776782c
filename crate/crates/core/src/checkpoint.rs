//! Single-file checkpoints: named tensors in safetensors layout plus a JSON
//! metadata record. Writes go through a temporary file and a rename.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

const META_KEY: &str = "cod.meta";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// What the tensors describe, e.g. `"cod"` or `"latent_adapter"`.
    pub kind: String,
    pub model: Option<ModelConfig>,
    /// Training configuration that produced the weights.
    pub train: Option<serde_json::Value>,
    pub stage: Option<String>,
    /// Hashes of the checkpoints this one was derived from, oldest first.
    pub provenance: Vec<String>,
    pub step: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, model: Option<ModelConfig>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            model,
            train: None,
            stage: None,
            provenance: Vec::new(),
            step: 0,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn to_bytes(tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    Ok(safetensors::serialize(contiguous, Some(info))?)
}

pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Checkpoint> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format("checkpoint lacks metadata record".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(bytes, device)?
        .into_iter()
        .collect();
    Ok(Checkpoint { meta, tensors })
}

/// Writes atomically and returns the hex SHA-256 of the file contents.
pub fn save(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
) -> Result<String> {
    let bytes = to_bytes(tensors, meta)?;
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("checkpoint {} not found", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    from_bytes(&bytes, device)
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
