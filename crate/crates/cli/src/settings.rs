//! Config files and flags: a TOML file supplies defaults, flags override it.
//! File keys are the flag names with `-` replaced by `_`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cod_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Environment variable naming the checkpoint cache directory.
pub const CACHE_ENV: &str = "COD_CACHE_DIR";

#[derive(Debug)]
pub struct Failure(pub Error);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match &self.0 {
            Error::NonFinite(_) => 3,
            Error::Format(_) | Error::Image(_) => 4,
            Error::Tensor(_) => 1,
            _ => 2,
        })
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub fn config_error(msg: impl Into<String>) -> Failure {
    Failure(Error::Config(msg.into()))
}

/// Merges `flags` over the contents of `file`; unknown file keys are errors.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>) -> CliResult<T> {
    let Some(path) = file else { return Ok(flags) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("config file {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| config_error(format!("config file {}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(table).map_err(|e| config_error(e.to_string()))?;
    let flags = serde_json::to_value(flags).map_err(|e| config_error(e.to_string()))?;
    if let (Value::Object(base), Value::Object(over)) = (&mut merged, flags) {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged)
        .map_err(|e| config_error(format!("config file {}: {e}", path.display())))
}

/// Canonical bytes of resolved settings, used to name run directories.
pub fn canonical_bytes<T: Serialize>(settings: &T) -> Vec<u8> {
    serde_json::to_vec(settings).unwrap_or_default()
}

/// A checkpoint path as given, or looked up in the cache directory.
pub fn find_checkpoint(given: Option<&PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = given.ok_or_else(|| config_error(format!("--{flag} is required")))?;
    if p.exists() {
        return Ok(p.clone());
    }
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        let dir = PathBuf::from(dir);
        for candidate in [dir.join(p), dir.join(p).with_extension("safetensors")] {
            if candidate.exists() {
                return Ok(candidate);
            }
        }
    }
    Err(config_error(format!(
        "checkpoint {} not found",
        p.display()
    )))
}

/// Output directory: the flag, else the cache directory, else `./runs`.
pub fn output_dir(given: Option<&PathBuf>) -> PathBuf {
    given
        .cloned()
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn parse<T: std::str::FromStr<Err = Error>>(
    value: Option<&String>,
    default: &str,
) -> CliResult<T> {
    Ok(value.map(String::as_str).unwrap_or(default).parse()?)
}
