use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::nn::{Dense, Scope};

/// Scale applied to `t` before the sinusoidal features.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features `[cos(t w_k), sin(t w_k)]` of `(batch,)` times.
pub fn timestep_features(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp() * TIME_SCALE)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    pub fc1: Dense,
    pub fc2: Dense,
    freq_dim: usize,
}

impl TimestepEmbedder {
    pub fn new(scope: &Scope, freq_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            fc1: Dense::new(&scope.pp("fc1"), freq_dim, width)?,
            fc2: Dense::new(&scope.pp("fc2"), width, width)?,
            freq_dim,
        })
    }

    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let h = self
            .fc1
            .forward(&timestep_features(t, self.freq_dim)?)?
            .silu()?;
        self.fc2.forward(&h)
    }

    pub fn num_params(&self) -> usize {
        dense_params(&self.fc1) + dense_params(&self.fc2)
    }
}

pub(crate) fn dense_params(d: &Dense) -> usize {
    d.weight.elem_count()
        + d.bias.as_ref().map_or(0, |b| b.elem_count())
        + d.adapter
            .as_ref()
            .map_or(0, |a| a.down.elem_count() + a.up.elem_count())
}

fn sincos_1d(dim: usize, pos: &[f64]) -> Vec<Vec<f64>> {
    let half = dim / 2;
    pos.iter()
        .map(|&p| {
            let mut row = Vec::with_capacity(dim);
            for k in 0..half {
                let w = 1.0 / 10000f64.powf(k as f64 / half as f64);
                row.push((p * w).sin());
            }
            for k in 0..half {
                let w = 1.0 / 10000f64.powf(k as f64 / half as f64);
                row.push((p * w).cos());
            }
            row
        })
        .collect()
}

/// Fixed 2D sine-cosine position table `(rows * cols, dim)`; half the channels
/// encode the row, half the column.
pub fn sincos_2d(
    rows: usize,
    cols: usize,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let r = sincos_1d(half, &(0..rows).map(|i| i as f64).collect::<Vec<_>>());
    let c = sincos_1d(dim - half, &(0..cols).map(|i| i as f64).collect::<Vec<_>>());
    let mut data = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        for j in 0..cols {
            data.extend_from_slice(&r[i]);
            data.extend_from_slice(&c[j]);
            data.resize(data.len() + (dim - r[i].len() - c[j].len()), 0.0);
        }
    }
    Ok(Tensor::from_vec(data, (rows * cols, dim), device)?.to_dtype(dtype)?)
}

/// Sine-cosine encoding of pixel coordinates inside a `p x p` patch,
/// `(p * p, 4 * freqs)`, coordinates mapped to `(-1, 1)`.
pub fn patch_coordinates(p: usize, freqs: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(p * p * 4 * freqs);
    for i in 0..p {
        for j in 0..p {
            let y = (2.0 * i as f64 + 1.0) / p as f64 - 1.0;
            let x = (2.0 * j as f64 + 1.0) / p as f64 - 1.0;
            for k in 0..freqs {
                let w = std::f64::consts::PI * (1u64 << k) as f64;
                data.extend_from_slice(&[
                    (w * y).sin(),
                    (w * y).cos(),
                    (w * x).sin(),
                    (w * x).cos(),
                ]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (p * p, 4 * freqs), device)?.to_dtype(dtype)?)
}
