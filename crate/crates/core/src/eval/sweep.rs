use candle_core::Tensor;

use crate::codec::{decode_batch, dp_control_decode, encode_batch, DecodeOptions};
use crate::config::CodecPreset;
use crate::error::{Error, Result};
use crate::extractor::{feature_distance, FeatureExtractor};
use crate::model::CodModel;
use crate::rate::compute_rate;

use super::metrics::{mean_psnr_signed, proxy_fid};
use super::report::{MetricRecord, SweepResult};

const CHUNK: usize = 16;

fn preset_name(model: &CodModel) -> String {
    let c = &model.config.codec;
    CodecPreset::all()
        .into_iter()
        .find(|p| p.downsample_factor == c.downsample_factor && p.codebook_size == c.codebook_size)
        .map(|p| p.name.to_string())
        .unwrap_or_else(|| format!("f{}n{}", c.downsample_factor, c.codebook_size))
}

/// Encodes and decodes `images` (`[-1, 1]`), one stream seed per image
/// starting at `seed`, in chunks.
pub fn roundtrip(
    model: &CodModel,
    images: &Tensor,
    seed: u64,
    steps_list: &[usize],
    opts: &DecodeOptions,
) -> Result<Vec<Tensor>> {
    let n = images.dim(0)?;
    let mut per_steps: Vec<Vec<Tensor>> = vec![Vec::new(); steps_list.len()];
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let x = images.narrow(0, start, len)?;
        let seeds: Vec<u64> = (0..len as u64).map(|i| seed + start as u64 + i).collect();
        let streams = encode_batch(model, &x, &seeds)?;
        if steps_list.len() == 1 {
            per_steps[0].push(decode_batch(
                model,
                &streams,
                &DecodeOptions {
                    steps: steps_list[0],
                    ..*opts
                },
            )?);
        } else {
            for (i, (_, img)) in dp_control_decode(model, &streams, steps_list, opts)?
                .into_iter()
                .enumerate()
            {
                per_steps[i].push(img);
            }
        }
    }
    per_steps.iter().map(|v| Ok(Tensor::cat(v, 0)?)).collect()
}

/// Metrics of decoded images against the originals.
pub fn score(
    model: &CodModel,
    originals: &Tensor,
    decoded: &Tensor,
    steps: usize,
    extractor: &dyn FeatureExtractor,
    model_id: &str,
) -> Result<MetricRecord> {
    let originals = originals.to_dtype(decoded.dtype())?;
    let fd = feature_distance(extractor, decoded, &originals)?
        .to_dtype(candle_core::DType::F64)?
        .mean_all()?
        .to_scalar::<f64>()?;
    let fid = if originals.dim(0)? >= 2 {
        proxy_fid(&originals, decoded, extractor)?
    } else {
        0.0
    };
    Ok(MetricRecord {
        bpp: compute_rate(&model.config.codec)?.bpp,
        psnr_db: mean_psnr_signed(&originals, decoded)?,
        feature_distance: fd,
        proxy_fid: fid,
        steps,
        preset: preset_name(model),
        model_id: model_id.to_string(),
    })
}

pub fn evaluate(
    model: &CodModel,
    images: &Tensor,
    seed: u64,
    opts: &DecodeOptions,
    extractor: &dyn FeatureExtractor,
    model_id: &str,
) -> Result<MetricRecord> {
    let decoded = roundtrip(model, images, seed, &[opts.steps], opts)?.remove(0);
    score(model, images, &decoded, opts.steps, extractor, model_id)
}

/// Quality against the number of decoding steps, from shared conditions and noise.
pub fn dp_sweep(
    model: &CodModel,
    images: &Tensor,
    seed: u64,
    steps_list: &[usize],
    opts: &DecodeOptions,
    extractor: &dyn FeatureExtractor,
    model_id: &str,
) -> Result<SweepResult> {
    if steps_list.is_empty() {
        return Err(Error::Config("no step counts given".into()));
    }
    let mut sorted = steps_list.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let decoded = roundtrip(model, images, seed, &sorted, opts)?;
    let points = sorted
        .iter()
        .zip(&decoded)
        .map(|(&s, d)| Ok((s as f64, score(model, images, d, s, extractor, model_id)?)))
        .collect::<Result<_>>()?;
    SweepResult::new("steps", points)
}

/// Rate-distortion curve over models at different operating points.
pub fn rd_sweep(
    models: &[(&CodModel, String)],
    images: &Tensor,
    seed: u64,
    opts: &DecodeOptions,
    extractor: &dyn FeatureExtractor,
) -> Result<SweepResult> {
    let mut points = models
        .iter()
        .map(|(m, id)| {
            let r = evaluate(m, images, seed, opts, extractor, id)?;
            Ok((r.bpp, r))
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    SweepResult::new("bpp", points)
}

/// Collects per-width evaluations into a sweep ordered by width.
pub fn scaling_result(mut points: Vec<(usize, MetricRecord)>) -> Result<SweepResult> {
    points.sort_by_key(|p| p.0);
    SweepResult::new(
        "width",
        points.into_iter().map(|(w, r)| (w as f64, r)).collect(),
    )
}
