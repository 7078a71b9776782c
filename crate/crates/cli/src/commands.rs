use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device};
use cod_core::bitstream::Bitstream;
use cod_core::checkpoint::{file_hash, write_atomic};
use cod_core::codec::{self, DecodeOptions};
use cod_core::config::{CodecPreset, ModelConfig, PredictionTarget, Space};
use cod_core::data::{png_bytes, read_png, BatchSampler, Dataset};
use cod_core::distill::{self, DistillConfig, DistillState, DmdWeighting};
use cod_core::eval::{self, run_dir, MetricRecord, SweepResult};
use cod_core::extractor::{FeatureExtractor, RandomConvExtractor};
use cod_core::flow::Solver;
use cod_core::latent::LatentAdapter;
use cod_core::model::CodModel;
use cod_core::nn::ParamStore;
use cod_core::training::{
    run_stage, stage_checkpoint_name, RunLog, Stage, StageRecipe, StageRun, TrainConfig, Trainer,
};
use cod_core::Error;
use serde::de::DeserializeOwned;

use crate::args::{DecodeArgs, DistillArgs, EncodeArgs, EvalArgs, SweepArgs, TrainArgs};
use crate::settings::{
    canonical_bytes, config_error, find_checkpoint, output_dir, parse, resolve, CliResult,
};

const DTYPE: DType = DType::F32;

fn device() -> Device {
    Device::Cpu
}

fn parse_enum<T: DeserializeOwned>(
    value: Option<&String>,
    default: &str,
    what: &str,
) -> CliResult<T> {
    let s = value.map(String::as_str).unwrap_or(default);
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| config_error(format!("unknown {what} {s:?}")))
}

fn load_dataset(
    dir: Option<&PathBuf>,
    synthetic: Option<usize>,
    seed: u64,
    size: usize,
) -> CliResult<Dataset> {
    match (dir, synthetic) {
        (Some(_), Some(_)) => Err(config_error(
            "give either --dataset or --synthetic, not both",
        )),
        (Some(d), None) => Ok(Dataset::from_png_dir(d, size)?),
        (None, Some(0)) => Err(config_error("--synthetic must be positive")),
        (None, Some(n)) => Ok(Dataset::synthetic(n, size, seed)),
        (None, None) => Err(config_error(
            "a dataset is required (--dataset or --synthetic)",
        )),
    }
}

fn extractor_for(cfg: &ModelConfig) -> CliResult<Arc<dyn FeatureExtractor>> {
    Ok(Arc::new(RandomConvExtractor::with_dim(
        cfg.feature_dim,
        DTYPE,
        &device(),
    )?))
}

fn load_model(path: &Path) -> CliResult<(CodModel, cod_core::checkpoint::CheckpointMeta)> {
    Ok(CodModel::load(path, DTYPE, &device())?)
}

fn model_id(path: &Path) -> CliResult<String> {
    Ok(file_hash(path)?[..12].to_string())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| config_error(format!("cannot create {}: {e}", dir.display())))
}

fn decode_options(
    steps: Option<usize>,
    solver: Option<&String>,
    cfg_scale: Option<f64>,
) -> CliResult<DecodeOptions> {
    let steps = steps.unwrap_or(25);
    if steps == 0 {
        return Err(config_error("--steps must be positive"));
    }
    let solver: Solver = parse(solver, "second_order")?;
    if let Some(s) = cfg_scale {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(config_error(format!(
                "--cfg-scale {s} must be non-negative"
            )));
        }
    }
    Ok(DecodeOptions {
        steps,
        solver,
        cfg_scale,
    })
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).unwrap_or_default()
    );
}

fn write_sweep(result: &SweepResult, out: Option<&PathBuf>, settings: &[u8]) -> CliResult<PathBuf> {
    let dir = run_dir(&output_dir(out), &timestamp(), settings);
    create_dir(&dir)?;
    let (csv, svg) = result.write(&dir)?;
    print_json(&serde_json::json!({
        "run_dir": dir,
        "csv": csv,
        "svg": svg,
        "records": result.points.iter().map(|(_, r)| r).collect::<Vec<_>>(),
    }));
    Ok(dir)
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let stage: Stage = parse(a.stage.as_ref(), "low_res_pretrain")?;
    let size = a.size.unwrap_or(32);
    let lr = a.lr.unwrap_or(1e-3);
    let steps = a.steps.unwrap_or(200);
    let recipe = StageRecipe::scaled(size, lr, lr / 5.0, [steps; 3]);
    let mut spec = recipe.get(stage)?.clone();
    if let Some(alpha) = a.alpha_flow_fraction {
        spec.alpha_flow_fraction = alpha;
    }
    let mut model = ModelConfig::desk(spec.size, spec.downsample_factor, a.width.unwrap_or(64));
    model.codec.depth = a.depth.unwrap_or(model.codec.depth);
    model.codec.space = parse_enum::<Space>(a.space.as_ref(), "pixel", "space")?;
    model.codec.prediction_target =
        parse_enum::<PredictionTarget>(a.prediction_target.as_ref(), "v", "prediction target")?;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        lambda_repa: a.lambda_repa.unwrap_or(defaults.lambda_repa),
        beta_commit: a.beta_commit.unwrap_or(defaults.beta_commit),
        gamma_aux: a.gamma_aux.unwrap_or(defaults.gamma_aux),
        uncond_dropout_p: a.uncond_dropout_p.unwrap_or(defaults.uncond_dropout_p),
        batch_size: a.batch_size.unwrap_or(16),
        seed: a.seed.unwrap_or(0),
        grad_clip: a.grad_clip.unwrap_or(defaults.grad_clip),
        ..defaults
    };
    spec.model_config(&model).validate()?;
    spec.train_config(&train).validate()?;
    if stage.needs_checkpoint() && a.init.is_none() {
        return Err(config_error(format!(
            "stage {} needs --init with the previous stage's checkpoint",
            stage.as_str()
        )));
    }
    let init = match &a.init {
        Some(p) => Some(find_checkpoint(Some(p), "init")?),
        None => None,
    };
    let data = load_dataset(
        a.dataset.as_ref(),
        a.synthetic,
        a.data_seed.unwrap_or(0),
        spec.size,
    )?;
    let latent = if model.codec.space == Space::Latent && init.is_none() {
        let store = Arc::new(ParamStore::new(train.seed ^ 0xAE, DTYPE, &device()));
        let adapter = LatentAdapter::new(store, model.denoiser.latent_channels)?;
        adapter.fit(
            &data,
            a.adapter_steps.unwrap_or(300),
            train.batch_size,
            2e-3,
            train.seed,
        )?;
        Some(Arc::new(adapter))
    } else {
        None
    };
    let out = output_dir(a.out.as_ref());
    create_dir(&out)?;
    let ckpt = stage_checkpoint_name(&out, stage);
    let log = ckpt.with_extension("jsonl");
    let extractor = extractor_for(&model)?;
    let (_, report, hash) = run_stage(StageRun {
        spec,
        model,
        train,
        data: &data,
        extractor: Some(extractor),
        latent,
        init,
        out: ckpt.clone(),
        log: Some(log.clone()),
        dtype: DTYPE,
        device: device(),
    })?;
    print_json(&serde_json::json!({
        "checkpoint": ckpt,
        "sha256": hash,
        "run_log": log,
        "dataset": data.content_hash(),
        "report": report,
    }));
    Ok(())
}

pub fn encode(args: EncodeArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let ckpt = find_checkpoint(a.checkpoint.as_ref(), "checkpoint")?;
    let input = a
        .input
        .as_ref()
        .ok_or_else(|| config_error("--input is required"))?;
    let output = a
        .output
        .as_ref()
        .ok_or_else(|| config_error("--output is required"))?;
    let (model, _) = load_model(&ckpt)?;
    if let Some(name) = &a.preset {
        codec::check_preset(&model, &CodecPreset::by_name(name)?)?;
    }
    let image = read_png(input, DTYPE, &device())?;
    let stream = codec::encode(&model, &image, a.seed.unwrap_or(0))?;
    write_atomic(output, &stream.serialize()?)?;
    let rate = codec::rate_report(&model)?;
    print_json(&serde_json::json!({
        "output": output,
        "total_bits": rate.total_bits,
        "bpp": rate.bpp,
        "payload_bits": stream.payload_bits(),
    }));
    Ok(())
}

pub fn decode(args: DecodeArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let ckpt = find_checkpoint(a.checkpoint.as_ref(), "checkpoint")?;
    let input = a
        .input
        .as_ref()
        .ok_or_else(|| config_error("--input is required"))?;
    let output = a
        .output
        .as_ref()
        .ok_or_else(|| config_error("--output is required"))?;
    let opts = decode_options(a.steps, a.solver.as_ref(), a.cfg_scale)?;
    let bytes =
        std::fs::read(input).map_err(|e| config_error(format!("{}: {e}", input.display())))?;
    let stream = Bitstream::parse(&bytes)?;
    let (model, _) = load_model(&ckpt)?;
    let image = codec::decode(&model, &stream, &opts)?;
    write_atomic(output, &png_bytes(&image)?)?;
    let rate = codec::rate_report(&model)?;
    print_json(&serde_json::json!({
        "output": output,
        "total_bits": rate.total_bits,
        "bpp": rate.bpp,
        "steps": opts.steps,
    }));
    Ok(())
}

pub fn distill(args: DistillArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let stage = a.stage.clone().unwrap_or_else(|| "distill".into());
    let default_lr = match stage.as_str() {
        "adapters" => 1e-4,
        _ => 1e-5,
    };
    let defaults = DistillConfig::default();
    let weighting = parse_enum::<DmdWeighting>(a.weighting.as_ref(), "mean_abs", "weighting")?;
    let cfg = DistillConfig {
        l1_weight: a.l1_weight.unwrap_or(defaults.l1_weight),
        feature_weight: a.feature_weight.unwrap_or(defaults.feature_weight),
        dmd_weight: a.dmd_weight.unwrap_or(defaults.dmd_weight),
        gan_weight: a.gan_weight.unwrap_or(defaults.gan_weight),
        repa_weight: a.repa_weight.unwrap_or(defaults.repa_weight),
        commit_weight: a.commit_weight.unwrap_or(defaults.commit_weight),
        ratio: a.ratio.unwrap_or(defaults.ratio),
        lr: a.lr.unwrap_or(default_lr),
        critic_lr: a.critic_lr.unwrap_or(defaults.critic_lr),
        real_cfg_scale: a.real_cfg_scale.unwrap_or(defaults.real_cfg_scale),
        weighting,
        t_min: a.t_min.unwrap_or(defaults.t_min),
        t_max: a.t_max.unwrap_or(defaults.t_max),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        steps: a.steps.unwrap_or(100),
        seed: a.seed.unwrap_or(0),
        grad_clip: a.grad_clip.unwrap_or(defaults.grad_clip),
    };
    cfg.validate()?;
    let ckpt = find_checkpoint(a.checkpoint.as_ref(), "checkpoint")?;
    let (base, meta) = load_model(&ckpt)?;
    let extractor = extractor_for(&base.config)?;
    let mut state = match stage.as_str() {
        "distill" => DistillState::distill(&base, cfg.clone(), Some(extractor))?,
        "adapters" => {
            let preset = CodecPreset::by_name(a.preset.as_deref().unwrap_or("cod-mid"))?;
            distill::finetune_adapters(
                &base,
                meta.stage.as_deref(),
                &preset,
                a.rank.unwrap_or(32),
                cfg.clone(),
                Some(extractor),
            )?
        }
        "full" => {
            let teacher_path = find_checkpoint(a.teacher.as_ref(), "teacher")?;
            let (teacher, _) = load_model(&teacher_path)?;
            distill::finetune_full(
                &base,
                meta.stage.as_deref(),
                &teacher,
                cfg.clone(),
                Some(extractor),
            )?
        }
        other => return Err(config_error(format!("unknown distill stage {other:?}"))),
    };
    let size = state.generator.config.codec.height;
    let data = load_dataset(
        a.dataset.as_ref(),
        a.synthetic,
        a.data_seed.unwrap_or(0),
        size,
    )?;
    let out = output_dir(a.out.as_ref());
    create_dir(&out)?;
    let target = out.join(format!("{}.safetensors", state.stage));
    let log = target.with_extension("jsonl");
    state = state.with_log(RunLog::create(&log)?);
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.seed)?;
    let mut last = None;
    for _ in 0..cfg.steps {
        let x = data.batch(&sampler.next_indices(), DTYPE, &device())?;
        let r = state.step(&x)?;
        if r.generator.is_some() {
            last = r.generator;
        }
    }
    let mut out_meta = state.generator.meta();
    out_meta.stage = Some(state.stage.to_string());
    out_meta.step = cfg.steps as u64;
    out_meta.train = Some(serde_json::to_value(&cfg).map_err(Error::from)?);
    out_meta.provenance = meta.provenance.clone();
    out_meta.provenance.push(file_hash(&ckpt)?);
    out_meta.extra.insert("dataset".into(), data.content_hash());
    let hash = state.generator.save(&target, &out_meta)?;
    print_json(&serde_json::json!({
        "checkpoint": target,
        "sha256": hash,
        "run_log": log,
        "stage": state.stage,
        "report": last,
    }));
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let ckpt = find_checkpoint(a.checkpoint.as_ref(), "checkpoint")?;
    let opts = decode_options(a.steps, a.solver.as_ref(), a.cfg_scale)?;
    let (model, _) = load_model(&ckpt)?;
    let data = load_dataset(
        a.dataset.as_ref(),
        a.synthetic,
        a.data_seed.unwrap_or(1),
        model.config.codec.height,
    )?;
    let images = data.all(DTYPE, &device())?;
    let extractor = extractor_for(&model.config)?;
    let record = eval::evaluate(
        &model,
        &images,
        a.seed.unwrap_or(0),
        &opts,
        extractor.as_ref(),
        &model_id(&ckpt)?,
    )?;
    let result = SweepResult::new("steps", vec![(opts.steps as f64, record)])?;
    write_sweep(&result, a.out.as_ref(), &canonical_bytes(&a))?;
    Ok(())
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let a = resolve(args.clone(), args.config.as_deref())?;
    let axis = a
        .axis
        .clone()
        .ok_or_else(|| config_error("--axis is required (steps, width or bpp)"))?;
    let opts = decode_options(a.steps, a.solver.as_ref(), a.cfg_scale)?;
    let seed = a.seed.unwrap_or(0);
    let result = match axis.as_str() {
        "steps" => {
            let values = a
                .values
                .clone()
                .ok_or_else(|| config_error("--values is required"))?;
            let ckpt = find_checkpoint(a.checkpoint.as_ref(), "checkpoint")?;
            let (model, _) = load_model(&ckpt)?;
            let data = load_dataset(
                a.dataset.as_ref(),
                a.synthetic,
                a.data_seed.unwrap_or(0),
                model.config.codec.height,
            )?;
            let ex = extractor_for(&model.config)?;
            if values.contains(&0) {
                return Err(config_error("step counts must be positive"));
            }
            eval::dp_sweep(
                &model,
                &data.all(DTYPE, &device())?,
                seed,
                &values,
                &opts,
                ex.as_ref(),
                &model_id(&ckpt)?,
            )?
        }
        "width" => width_sweep(&a, &opts, seed)?,
        "bpp" => {
            let paths = a
                .checkpoints
                .clone()
                .ok_or_else(|| config_error("--checkpoints is required"))?;
            let mut models = Vec::new();
            for p in &paths {
                let p = find_checkpoint(Some(p), "checkpoints")?;
                models.push((load_model(&p)?.0, model_id(&p)?));
            }
            let first = models
                .first()
                .ok_or_else(|| config_error("--checkpoints is empty"))?;
            let size = first.0.config.codec.height;
            if models.iter().any(|(m, _)| m.config.codec.height != size) {
                return Err(config_error("bpp sweep needs models of one image size"));
            }
            let data = load_dataset(
                a.dataset.as_ref(),
                a.synthetic,
                a.data_seed.unwrap_or(0),
                size,
            )?;
            let ex = extractor_for(&first.0.config)?;
            let refs: Vec<_> = models.iter().map(|(m, id)| (m, id.clone())).collect();
            eval::rd_sweep(
                &refs,
                &data.all(DTYPE, &device())?,
                seed,
                &opts,
                ex.as_ref(),
            )?
        }
        other => return Err(config_error(format!("unknown axis {other:?}"))),
    };
    write_sweep(&result, a.out.as_ref(), &canonical_bytes(&a))?;
    Ok(())
}

fn width_sweep(a: &SweepArgs, opts: &DecodeOptions, seed: u64) -> CliResult<SweepResult> {
    let mut widths = a
        .values
        .clone()
        .ok_or_else(|| config_error("--values is required"))?;
    if widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_error("widths must be strictly increasing"));
    }
    widths.dedup();
    let size = a.size.unwrap_or(32);
    let data = load_dataset(
        a.dataset.as_ref(),
        a.synthetic,
        a.data_seed.unwrap_or(0),
        size,
    )?;
    let (train, test) = data.split(a.holdout.unwrap_or(8))?;
    let tc = TrainConfig {
        lr: a.lr.unwrap_or(1e-3),
        batch_size: a.batch_size.unwrap_or(16),
        steps: a.train_steps.unwrap_or(200),
        seed,
        ..TrainConfig::default()
    };
    let test_images = test.all(DTYPE, &device())?;
    let mut points: Vec<(usize, MetricRecord)> = Vec::new();
    for &w in &widths {
        let cfg = ModelConfig::desk(size, 16, w);
        let model = CodModel::new(&cfg, seed, DTYPE, &device())?;
        let ex = extractor_for(&cfg)?;
        let mut trainer = Trainer::new(&model, tc.clone(), Some(ex.clone()), |_| true)?;
        let mut sampler = BatchSampler::new(train.len(), tc.batch_size, seed)?;
        for _ in 0..tc.steps {
            trainer.step(
                &model,
                &train.batch(&sampler.next_indices(), DTYPE, &device())?,
            )?;
        }
        let id = format!("width{w}");
        points.push((
            w,
            eval::evaluate(&model, &test_images, seed, opts, ex.as_ref(), &id)?,
        ));
    }
    Ok(eval::scaling_result(points)?)
}
