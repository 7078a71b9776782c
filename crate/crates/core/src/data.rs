//! Image datasets held as 8-bit RGB and served as `[-1, 1]` tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n * height * width * 3` bytes, row-major RGB.
    pixels: Vec<u8>,
    len: usize,
    height: usize,
    width: usize,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Sixteen well separated colours.
pub fn palette() -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(16);
    for k in 0..12 {
        let v = if k % 2 == 0 { 0.9 } else { 0.6 };
        out.push(hsv(k as f64 / 12.0, 0.75, v));
    }
    out.extend([
        [0.1, 0.1, 0.1],
        [0.95, 0.95, 0.95],
        [0.5, 0.5, 0.5],
        [0.3, 0.2, 0.15],
    ]);
    out
}

impl Dataset {
    pub fn from_pixels(pixels: Vec<u8>, len: usize, height: usize, width: usize) -> Result<Self> {
        if pixels.len() != len * height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for {len} images of {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            len,
            height,
            width,
        })
    }

    /// Procedural images: each quadrant is a palette colour with oriented
    /// stripes and grain of random strength.
    pub fn synthetic(len: usize, size: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let pal = palette();
        let q = (size / 2).max(1);
        let mut pixels = vec![0u8; len * size * size * 3];
        for n in 0..len {
            let mut quads = Vec::with_capacity(4);
            for _ in 0..4 {
                let base = pal[rng.random_range(0..pal.len())];
                let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
                let amp: f64 = rng.random_range(0.0..0.2);
                let freq: f64 = rng.random_range(1.0..4.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                quads.push((base, jitter, amp, freq, angle, phase));
            }
            for y in 0..size {
                for x in 0..size {
                    let qi = (y / q).min(1) * 2 + (x / q).min(1);
                    let (base, jitter, amp, freq, angle, phase) = &quads[qi];
                    let (u, v) = ((x % q) as f64 / q as f64, (y % q) as f64 / q as f64);
                    let coord = u * angle.cos() + v * angle.sin();
                    let stripe = amp * (std::f64::consts::TAU * freq * coord + phase).sin();
                    let grain: f64 = rng.random_range(-0.03..0.03);
                    for c in 0..3 {
                        let val = (base[c] + jitter[c] + stripe + grain).clamp(0.0, 1.0);
                        pixels[((n * size + y) * size + x) * 3 + c] = (val * 255.0).round() as u8;
                    }
                }
            }
        }
        Self {
            pixels,
            len,
            height: size,
            width: size,
        }
    }

    /// Every PNG in `dir` (sorted by name), centre-cropped to a square and
    /// resized to `size x size`.
    pub fn from_png_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("dataset directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no PNG files in {}", dir.display())));
        }
        let mut pixels = Vec::with_capacity(paths.len() * size * size * 3);
        for p in &paths {
            let img = image::open(p)?.to_rgb8();
            let side = img.width().min(img.height());
            let crop = imageops::crop_imm(
                &img,
                (img.width() - side) / 2,
                (img.height() - side) / 2,
                side,
                side,
            )
            .to_image();
            let resized = if side as usize == size {
                crop
            } else {
                imageops::resize(
                    &crop,
                    size as u32,
                    size as u32,
                    imageops::FilterType::Triangle,
                )
            };
            pixels.extend_from_slice(resized.as_raw());
        }
        Ok(Self {
            pixels,
            len: paths.len(),
            height: size,
            width: size,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        if i >= self.len {
            return Err(Error::Range(format!("image {i} of {}", self.len)));
        }
        let n = self.height * self.width * 3;
        RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.pixels[i * n..(i + 1) * n].to_vec(),
        )
        .ok_or_else(|| Error::Shape("image buffer size".into()))
    }

    /// `(len(indices), 3, H, W)` in `[-1, 1]`.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.height * self.width * 3;
        let mut bytes = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len {
                return Err(Error::Range(format!("image {i} of {}", self.len)));
            }
            bytes.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_vec(bytes, (indices.len(), self.height, self.width, 3), device)?
            .permute((0, 3, 1, 2))?
            .to_dtype(DType::F64)?;
        Ok(((t / 127.5)? - 1.0)?.to_dtype(dtype)?)
    }

    pub fn all(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.batch(&(0..self.len).collect::<Vec<_>>(), dtype, device)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.height * self.width * 3;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len {
                return Err(Error::Range(format!("image {i} of {}", self.len)));
            }
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        Self::from_pixels(pixels, indices.len(), self.height, self.width)
    }

    /// First `len - holdout` images and the remaining `holdout`.
    pub fn split(&self, holdout: usize) -> Result<(Self, Self)> {
        if holdout >= self.len {
            return Err(Error::Config(format!(
                "holdout {holdout} leaves no training images"
            )));
        }
        let cut = self.len - holdout;
        Ok((
            self.subset(&(0..cut).collect::<Vec<_>>())?,
            self.subset(&(cut..self.len).collect::<Vec<_>>())?,
        ))
    }
}

/// Seeded sampler of shuffled mini-batch indices, reshuffling each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::Config(
                "batch sampler needs data and a positive batch size".into(),
            ));
        }
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch,
            rng: seeded_rng(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// `(1, 3, H, W)` tensor in `[-1, 1]` from an 8-bit image.
pub fn image_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let ds = Dataset::from_pixels(img.as_raw().clone(), 1, h as usize, w as usize)?;
    ds.batch(&[0], dtype, device)
}

/// 8-bit quantisation of a `(3, H, W)` or `(1, 3, H, W)` tensor in `[-1, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let t = if t.rank() == 4 {
        t.squeeze(0)?
    } else {
        t.clone()
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let vals: Vec<f64> = t
        .permute((1, 2, 0))?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let bytes = vals.iter().map(|v| quantize_u8(*v)).collect();
    RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size".into()))
}

/// Reads a PNG as a `(1, 3, H, W)` tensor in `[-1, 1]`.
pub fn read_png(path: &Path, dtype: DType, device: &Device) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    image_to_tensor(&img, dtype, device)
}

/// Encodes `t` (`[-1, 1]`) as PNG bytes.
pub fn png_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let img = tensor_to_image(t)?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn quantize_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Round trip through 8-bit, in `[-1, 1]`.
pub fn quantize_tensor(t: &Tensor) -> Result<Tensor> {
    let q = ((t.clamp(-1.0, 1.0)? + 1.0)? * 127.5)?.round()?;
    Ok(((q / 127.5)? - 1.0)?)
}
