//! Image to bitstream and back.

use candle_core::{Tensor, D};

use crate::bitstream::{Bitstream, Header};
use crate::config::{CodecPreset, Space};
use crate::error::{Error, Result};
use crate::flow::{initial_noise, one_step_sample, sample_from, SamplerConfig, Solver};
use crate::model::CodModel;
use crate::rate::{compute_rate, RateReport};

/// Guidance scale used when none is given.
pub fn default_cfg_scale(space: Space) -> f64 {
    match space {
        Space::Pixel => 3.0,
        Space::Latent => 1.25,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub steps: usize,
    pub solver: Solver,
    /// `None` selects [`default_cfg_scale`].
    pub cfg_scale: Option<f64>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            steps: 25,
            solver: Solver::SecondOrder,
            cfg_scale: None,
        }
    }
}

fn require_trained(model: &CodModel) -> Result<()> {
    if !model.is_trained()? {
        return Err(Error::State(
            "model has not been trained (codebook never initialised)".into(),
        ));
    }
    Ok(())
}

/// Fails unless `model` was built for `preset`.
pub fn check_preset(model: &CodModel, preset: &CodecPreset) -> Result<()> {
    let c = &model.config.codec;
    if c.downsample_factor != preset.downsample_factor || c.codebook_size != preset.codebook_size {
        return Err(Error::Config(format!(
            "model uses f={}, N={}, preset {} needs f={}, N={}",
            c.downsample_factor,
            c.codebook_size,
            preset.name,
            preset.downsample_factor,
            preset.codebook_size
        )));
    }
    Ok(())
}

/// Encodes each image of a `(B, 3, H, W)` batch; `seeds[i]` travels in stream `i`.
pub fn encode_batch(model: &CodModel, images: &Tensor, seeds: &[u64]) -> Result<Vec<Bitstream>> {
    require_trained(model)?;
    let (b, _, h, w) = images.dims4()?;
    let c = &model.config.codec;
    if (h, w) != (c.height, c.width) {
        return Err(Error::Config(format!(
            "image {h}x{w}, model configured for {}x{}",
            c.height, c.width
        )));
    }
    if seeds.len() != b {
        return Err(Error::Config(format!(
            "{} seeds for {b} images",
            seeds.len()
        )));
    }
    let z_e = model.conditioner.encode(&images.to_dtype(model.dtype())?)?;
    let q = model.conditioner.quantize(&z_e)?;
    q.grids
        .into_iter()
        .zip(seeds)
        .map(|(g, &seed)| Bitstream::new(Header::for_config(c, seed)?, g))
        .collect()
}

pub fn encode(model: &CodModel, image: &Tensor, seed: u64) -> Result<Bitstream> {
    let image = if image.rank() == 3 {
        image.unsqueeze(0)?
    } else {
        image.clone()
    };
    Ok(encode_batch(model, &image, &[seed])?.remove(0))
}

pub fn rate_report(model: &CodModel) -> Result<RateReport> {
    compute_rate(&model.config.codec)
}

fn check_header(model: &CodModel, bs: &Bitstream) -> Result<()> {
    let expected = Header::for_config(&model.config.codec, bs.header.seed)?;
    if bs.header != expected {
        return Err(Error::Format(format!(
            "bitstream header {:?} does not match the model ({:?})",
            bs.header, expected
        )));
    }
    Ok(())
}

/// Condition and initial noise for a batch of streams.
fn prepare(model: &CodModel, streams: &[Bitstream]) -> Result<(Tensor, Tensor)> {
    require_trained(model)?;
    if streams.is_empty() {
        return Err(Error::Config("no bitstreams to decode".into()));
    }
    for s in streams {
        check_header(model, s)?;
    }
    let grids: Vec<_> = streams.iter().map(|s| s.tokens.clone()).collect();
    let cond = model.conditioner.condition_from_tokens(&grids)?;
    let shape = model.sample_shape(1);
    let noise: Vec<Tensor> = streams
        .iter()
        .map(|s| initial_noise(s.header.seed, &shape, model.dtype(), model.device()))
        .collect::<Result<_>>()?;
    Ok((cond, Tensor::cat(&noise, 0)?))
}

fn integrate(
    model: &CodModel,
    cond: &Tensor,
    noise: &Tensor,
    opts: &DecodeOptions,
) -> Result<Tensor> {
    let scale = opts
        .cfg_scale
        .unwrap_or_else(|| default_cfg_scale(model.config.codec.space));
    let sample = if opts.steps == 1 {
        one_step_sample(&model.denoiser, Some(cond), noise, scale)?
    } else {
        let cfg = SamplerConfig {
            steps: opts.steps,
            solver: opts.solver,
            cfg_scale: scale,
            seed: 0,
        };
        sample_from(&model.denoiser, Some(cond), noise, &cfg, |_, _, _| {})?
    };
    Ok(model.to_image(&sample)?.clamp(-1.0, 1.0)?.detach())
}

/// Decodes streams together; images in `[-1, 1]`, `(B, 3, H, W)`.
pub fn decode_batch(
    model: &CodModel,
    streams: &[Bitstream],
    opts: &DecodeOptions,
) -> Result<Tensor> {
    let (cond, noise) = prepare(model, streams)?;
    integrate(model, &cond, &noise, opts)
}

pub fn decode(model: &CodModel, stream: &Bitstream, opts: &DecodeOptions) -> Result<Tensor> {
    decode_batch(model, std::slice::from_ref(stream), opts)
}

/// One decode per step count from the same condition and seed.
pub fn dp_control_decode(
    model: &CodModel,
    streams: &[Bitstream],
    steps_list: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<(usize, Tensor)>> {
    let (cond, noise) = prepare(model, streams)?;
    steps_list
        .iter()
        .map(|&steps| {
            Ok((
                steps,
                integrate(model, &cond, &noise, &DecodeOptions { steps, ..*opts })?,
            ))
        })
        .collect()
}

/// Bitstreams with their token positions shuffled by a fixed rotation, for
/// checking that decoded content depends on the tokens.
pub fn rotate_tokens(stream: &Bitstream) -> Result<Bitstream> {
    let mut t = stream.tokens.clone();
    t.indices.rotate_left(1);
    Bitstream::new(stream.header, t)
}

/// Per-image squared error, handy when comparing decodes.
pub fn per_image_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let d = a.sub(b)?.sqr()?.flatten_from(1)?.mean(D::Minus1)?;
    Ok(d.to_dtype(candle_core::DType::F64)?.to_vec1()?)
}
