//! Nearest-neighbour vector quantiser with an EMA-updated codebook.
//!
//! Codebook state lives in store buffers so it travels with checkpoints but
//! never receives gradients.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::bitstream::TokenGrid;
use crate::error::{Error, Result};
use crate::nn::{mse, seeded_rng, Init, ParamStore};

const EMA_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Quantized {
    /// One grid per batch element.
    pub grids: Vec<TokenGrid>,
    /// Selected entries with the straight-through surrogate attached, `(B, d, h, w)`.
    pub z_q: Tensor,
    /// Selected entries without the surrogate.
    pub z_q_raw: Tensor,
    /// `mse(z_e, sg(z_q))`, the term that reaches the encoder.
    pub commitment: Tensor,
    /// `mse(sg(z_e), z_q)`. Under EMA learning this is reported but carries no gradient.
    pub codebook: Tensor,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    store: Arc<ParamStore>,
    prefix: String,
    size: usize,
    dim: usize,
    decay: f64,
    dead_after: u64,
}

fn flatten_grid(z: &Tensor) -> Result<(Vec<f64>, (usize, usize, usize, usize))> {
    let (b, d, h, w) = z.dims4()?;
    let flat = z
        .permute((0, 2, 3, 1))?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok((flat, (b, d, h, w)))
}

/// Index of the entry nearest to `v`, lowest index on ties.
pub fn nearest(entries: &[f64], dim: usize, v: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, e) in entries.chunks_exact(dim).enumerate() {
        let d: f64 = e.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl Codebook {
    pub fn new(
        store: &Arc<ParamStore>,
        prefix: &str,
        size: usize,
        dim: usize,
        decay: f64,
        dead_after: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config(
                "codebook must have at least one entry".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::Config(
                "codebook entries must have positive dimension".into(),
            ));
        }
        let scope = store.root().pp(prefix);
        let cb = Self {
            store: store.clone(),
            prefix: prefix.to_string(),
            size,
            dim,
            decay,
            dead_after,
        };
        scope.buffer("entries", &[size, dim], Init::Normal(1.0))?;
        scope.buffer("ema_sum", &[size, dim], Init::Zeros)?;
        scope.buffer("ema_count", &[size], Init::Ones)?;
        scope.buffer("usage", &[size], Init::Zeros)?;
        scope.buffer("idle_steps", &[size], Init::Zeros)?;
        scope.buffer("initialized", &[1], Init::Zeros)?;
        Ok(cb)
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn buffer(&self, name: &str) -> Result<Tensor> {
        self.store
            .get_buffer(&self.key(name))
            .ok_or_else(|| Error::State(format!("codebook buffer {name} missing")))
    }

    /// `(N, d)` entries.
    pub fn entries(&self) -> Result<Tensor> {
        self.buffer("entries")
    }

    fn entries_f64(&self) -> Result<Vec<f64>> {
        Ok(self
            .entries()?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }

    /// Cumulative number of times each entry has been selected during training.
    pub fn usage_counts(&self) -> Result<Vec<u64>> {
        let u: Vec<f64> = self.buffer("usage")?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(u.into_iter().map(|x| x as u64).collect())
    }

    pub fn is_initialized(&self) -> Result<bool> {
        let v: Vec<f64> = self
            .buffer("initialized")?
            .to_dtype(DType::F64)?
            .to_vec1()?;
        Ok(v[0] > 0.5)
    }

    pub fn quantize(&self, z_e: &Tensor) -> Result<Quantized> {
        let (flat, (b, d, h, w)) = flatten_grid(z_e)?;
        if d != self.dim {
            return Err(Error::Config(format!(
                "latent has {d} channels, codebook entries have {}",
                self.dim
            )));
        }
        let entries = self.entries_f64()?;
        let mut grids = Vec::with_capacity(b);
        let mut all = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            let mut idx = Vec::with_capacity(h * w);
            for p in 0..h * w {
                let off = (bi * h * w + p) * d;
                let (k, _) = nearest(&entries, d, &flat[off..off + d]);
                idx.push(k as u32);
                all.push(k as u32);
            }
            grids.push(TokenGrid::new(h, w, idx)?);
        }
        let z_q_raw = self.lookup(&all, (b, h, w))?.to_dtype(z_e.dtype())?;
        let z_q = z_e.add(&z_q_raw.sub(z_e)?.detach())?;
        let commitment = mse(z_e, &z_q_raw.detach())?;
        let codebook = mse(&z_e.detach(), &z_q_raw)?;
        Ok(Quantized {
            grids,
            z_q,
            z_q_raw,
            commitment,
            codebook,
        })
    }

    fn lookup(&self, indices: &[u32], (b, h, w): (usize, usize, usize)) -> Result<Tensor> {
        if let Some(bad) = indices.iter().find(|&&i| i as usize >= self.size) {
            return Err(Error::Range(format!(
                "token index {bad} outside codebook of size {}",
                self.size
            )));
        }
        let ids = Tensor::from_vec(indices.to_vec(), indices.len(), self.store.device())?;
        let rows = self.entries()?.index_select(&ids, 0)?;
        Ok(rows
            .reshape((b, h, w, self.dim))?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// Table lookup of token grids into `(B, d, h, w)`.
    pub fn dequantize(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Shape("no token grids to dequantize".into()))?;
        let (h, w) = (first.rows, first.cols);
        let mut all = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if (g.rows, g.cols) != (h, w) {
                return Err(Error::Shape("token grids differ in size".into()));
            }
            all.extend_from_slice(&g.indices);
        }
        self.lookup(&all, (grids.len(), h, w))
    }

    /// EMA update from a training batch. The first call seeds entries from the batch.
    pub fn update(&self, z_e: &Tensor, grids: &[TokenGrid], seed: u64) -> Result<()> {
        let (flat, (_, d, _, _)) = flatten_grid(&z_e.detach())?;
        let m = flat.len() / d;
        let dtype = self.store.dtype();
        let dev = self.store.device().clone();
        let mut rng = seeded_rng(seed ^ 0xC0DE_B00C);
        let put = |name: &str, v: Vec<f64>, shape: &[usize]| -> Result<()> {
            self.store.set_buffer(
                &self.key(name),
                Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?,
            )
        };
        if !self.is_initialized()? {
            let mut entries = Vec::with_capacity(self.size * d);
            for k in 0..self.size {
                let src = if k < m { k } else { rng.random_range(0..m) };
                let jitter = if k < m { 0.0 } else { 1e-2 };
                for j in 0..d {
                    let n: f64 = rng.sample(rand_distr::StandardNormal);
                    entries.push(flat[src * d + j] + jitter * n);
                }
            }
            put("entries", entries.clone(), &[self.size, d])?;
            put("ema_sum", entries, &[self.size, d])?;
            put("ema_count", vec![1.0; self.size], &[self.size])?;
            put("initialized", vec![1.0], &[1])?;
            return Ok(());
        }
        let mut counts = vec![0f64; self.size];
        let mut sums = vec![0f64; self.size * d];
        let mut p = 0;
        for g in grids {
            for &k in &g.indices {
                let k = k as usize;
                counts[k] += 1.0;
                for j in 0..d {
                    sums[k * d + j] += flat[p * d + j];
                }
                p += 1;
            }
        }
        let f = |name: &str| -> Result<Vec<f64>> {
            Ok(self
                .buffer(name)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1()?)
        };
        let mut ema_count = f("ema_count")?;
        let mut ema_sum = f("ema_sum")?;
        let mut usage = f("usage")?;
        let mut idle = f("idle_steps")?;
        let a = self.decay;
        for k in 0..self.size {
            ema_count[k] = a * ema_count[k] + (1.0 - a) * counts[k];
            for j in 0..d {
                ema_sum[k * d + j] = a * ema_sum[k * d + j] + (1.0 - a) * sums[k * d + j];
            }
            usage[k] += counts[k];
            idle[k] = if counts[k] > 0.0 { 0.0 } else { idle[k] + 1.0 };
        }
        let total: f64 = ema_count.iter().sum();
        let mut entries = vec![0f64; self.size * d];
        for k in 0..self.size {
            // Laplace smoothing keeps rarely used entries from dividing by ~0
            let n = (ema_count[k] + EMA_EPS) / (total + self.size as f64 * EMA_EPS) * total;
            for j in 0..d {
                entries[k * d + j] = ema_sum[k * d + j] / n;
            }
        }
        for k in 0..self.size {
            if idle[k] >= self.dead_after as f64 {
                let src = rng.random_range(0..m);
                for j in 0..d {
                    entries[k * d + j] = flat[src * d + j];
                    ema_sum[k * d + j] = flat[src * d + j];
                }
                ema_count[k] = 1.0;
                idle[k] = 0.0;
            }
        }
        put("entries", entries, &[self.size, d])?;
        put("ema_sum", ema_sum, &[self.size, d])?;
        put("ema_count", ema_count, &[self.size])?;
        put("usage", usage, &[self.size])?;
        put("idle_steps", idle, &[self.size])?;
        Ok(())
    }

    /// Overwrite entries directly, marking the codebook initialised.
    pub fn set_entries(&self, entries: &Tensor) -> Result<()> {
        let (n, d) = entries.dims2()?;
        if (n, d) != (self.size, self.dim) {
            return Err(Error::Shape(format!(
                "entries {:?} do not match codebook ({}, {})",
                entries.dims(),
                self.size,
                self.dim
            )));
        }
        let e = entries.to_dtype(self.store.dtype())?;
        self.store.set_buffer(&self.key("entries"), e.clone())?;
        self.store.set_buffer(&self.key("ema_sum"), e)?;
        let one = Tensor::ones(1, self.store.dtype(), self.store.device())?;
        self.store.set_buffer(&self.key("initialized"), one)
    }
}
