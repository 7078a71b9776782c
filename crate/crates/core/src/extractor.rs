//! Pluggable representation extractor used for feature alignment, the
//! auxiliary feature head, perceptual distance and the proxy FID.

use candle_core::{DType, Device, Tensor, D};

use crate::config::TOKEN_STRIDE;
use crate::error::{Error, Result};
use crate::nn::{gaussian, seeded_rng};

pub trait FeatureExtractor: Send + Sync {
    /// Channel dimension of [`Self::dense`].
    fn dim(&self) -> usize;

    /// Features at `1/16` resolution, `(batch, dim, h/16, w/16)`.
    fn dense(&self, images: &Tensor) -> Result<Tensor>;

    /// Intermediate feature maps, finest first.
    fn pyramid(&self, images: &Tensor) -> Result<Vec<Tensor>>;

    /// One pooled vector per image, `(batch, dim)`.
    fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.dense(images)?.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// A frozen, randomly initialised strided convolution stack.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    kernels: Vec<Tensor>,
    dim: usize,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;

impl RandomConvExtractor {
    /// Four stride-2 stages, so `dense` lands at `1/16` resolution.
    pub fn new(dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let widths = [3, 16, 32, 32, dim];
        let mut rng = seeded_rng(seed);
        let mut kernels = Vec::with_capacity(4);
        for w in widths.windows(2) {
            let (cin, cout) = (w[0], w[1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            kernels.push((gaussian(&mut rng, &[cout, cin, 3, 3], dtype, device)? * std)?);
        }
        debug_assert_eq!(1 << kernels.len(), TOKEN_STRIDE);
        Ok(Self { kernels, dim })
    }

    pub fn with_dim(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::new(dim, DEFAULT_EXTRACTOR_SEED, dtype, device)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dense(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.pyramid(images)?.pop().expect("four stages"))
    }

    fn pyramid(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % TOKEN_STRIDE != 0 || w % TOKEN_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "extractor expects 3-channel images with sides divisible by {TOKEN_STRIDE}, got {:?}",
                images.dims()
            )));
        }
        let mut x = images.clone();
        let mut out = Vec::with_capacity(self.kernels.len());
        for (i, k) in self.kernels.iter().enumerate() {
            x = x.conv2d(k, 1, 2, 1, 1)?;
            if i + 1 < self.kernels.len() {
                x = x.relu()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Perceptual distance between image batches: per level, channel-normalised
/// features are compared by squared distance and averaged over positions;
/// levels are averaged. Returns one value per image, `(batch,)`.
pub fn feature_distance(
    extractor: &dyn FeatureExtractor,
    a: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let fa = extractor.pyramid(a)?;
    let fb = extractor.pyramid(b)?;
    let levels = fa.len() as f64;
    let mut acc: Option<Tensor> = None;
    for (x, y) in fa.iter().zip(fb.iter()) {
        let nx = unit_channels(x)?;
        let ny = unit_channels(y)?;
        let d = nx.sub(&ny)?.sqr()?.sum(1)?.flatten_from(1)?.mean(1)?;
        acc = Some(match acc {
            Some(s) => s.add(&d)?,
            None => d,
        });
    }
    Ok((acc.expect("at least one level") / levels)?)
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}
