use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::error::Result;

/// Payload-only rate; header bytes are not counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub total_bits: u64,
    pub bpp: f64,
}

pub fn compute_rate(config: &CodecConfig) -> Result<RateReport> {
    config.validate()?;
    let (rows, cols) = config.grid_dims();
    let total_bits = (rows * cols) as u64 * u64::from(config.bits_per_token());
    Ok(RateReport {
        total_bits,
        bpp: total_bits as f64 / (config.height * config.width) as f64,
    })
}
