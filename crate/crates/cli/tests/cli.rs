use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cod"))
        .args(args)
        .output()
        .expect("run cod")
}

fn cod_env(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cod"))
        .args(args)
        .env("COD_CACHE_DIR", cache)
        .output()
        .expect("run cod")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(o: &Output) -> serde_json::Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk_pretrain.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A first-stage 32x32 model trained briefly; returns its checkpoint.
fn small_model(dir: &Path) -> PathBuf {
    let out = dir.join("small");
    let o = cod(&[
        "train",
        "--config",
        s(&bundled()),
        "--synthetic",
        "16",
        "--steps",
        "12",
        "--out",
        s(&out),
    ]);
    PathBuf::from(ok(&o)["checkpoint"].as_str().unwrap())
}

fn flags(help: &str) -> Vec<String> {
    help.split_whitespace()
        .filter(|w| w.starts_with("--"))
        .map(|w| {
            w.trim_end_matches(|c: char| !c.is_alphanumeric())
                .trim_start_matches("--")
                .to_string()
        })
        .filter(|f| f != "help" && f != "version" && f != "config")
        .collect()
}

#[test]
fn help_documents_flags_and_file_keys_match() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "encode", "decode", "distill", "eval", "sweep"] {
        let o = cod(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let help = String::from_utf8_lossy(&o.stdout).to_string();
        let names = flags(&help);
        assert!(!names.is_empty(), "{cmd}");
        for name in &names {
            // Every flag line carries a description.
            let line = help
                .lines()
                .find(|l| l.contains(&format!("--{name} ")))
                .unwrap_or("");
            assert!(
                line.trim().len() > name.len() + 8 || help.contains(&format!("--{name} <")),
                "{cmd} --{name}"
            );
            // A file key with an ill-typed value is a type error, never an unknown key.
            let key = name.replace('-', "_");
            let cfg = dir.path().join(format!("{cmd}-{key}.toml"));
            std::fs::write(&cfg, format!("{key} = {{ nested = true }}\n")).unwrap();
            let o = cod(&[cmd, "--config", s(&cfg)]);
            let err = String::from_utf8_lossy(&o.stderr);
            assert_eq!(code(&o), 2, "{cmd} {key}: {err}");
            assert!(!err.contains("unknown field"), "{cmd} {key}: {err}");
        }
        let cfg = dir.path().join("unknown.toml");
        std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
        let o = cod(&[cmd, "--config", s(&cfg)]);
        assert_eq!(code(&o), 2);
        assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    }
}

#[test]
fn bundled_config_trains_and_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = cod(&[
        "train",
        "--config",
        s(&bundled()),
        "--synthetic",
        "16",
        "--out",
        s(&out),
    ]);
    let v = ok(&o);
    let log = std::fs::read_to_string(v["run_log"].as_str().unwrap()).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["losses"]["total"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(totals.len(), 60);
    let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = totals[55..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(Path::new(v["checkpoint"].as_str().unwrap()).exists());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = cod(&[
        "train",
        "--config",
        s(&bundled()),
        "--synthetic",
        "4",
        "--lambda-repa",
        "-1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let o = cod(&[
        "train",
        "--stage",
        "unified_post_train",
        "--synthetic",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let o = cod(&["encode", "--input", "a.png", "--output", "b.codb"]);
    assert_eq!(code(&o), 2);
    let o = cod(&[
        "sweep",
        "--axis",
        "steps",
        "--values",
        "1,5",
        "--synthetic",
        "2",
    ]);
    assert_eq!(code(&o), 2);
    let o = cod(&["train", "--bogus-flag"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn encode_decode_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_model(dir.path());
    let png = dir.path().join("in.png");
    std::fs::write(
        &png,
        cod_core::data::png_bytes(
            &cod_core::data::Dataset::synthetic(1, 32, 5)
                .all(candle_core::DType::F32, &candle_core::Device::Cpu)
                .unwrap(),
        )
        .unwrap(),
    )
    .unwrap();
    let codb = dir.path().join("a.codb");
    let v = ok(&cod(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&png),
        "--output",
        s(&codb),
        "--seed",
        "3",
    ]));
    assert_eq!(v["total_bits"], 16);
    assert_eq!(v["payload_bits"], 16);
    let first = std::fs::read(&codb).unwrap();
    ok(&cod(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&png),
        "--output",
        s(&codb),
        "--seed",
        "3",
    ]));
    assert_eq!(first, std::fs::read(&codb).unwrap());

    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    ok(&cod(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&codb),
        "--output",
        s(&a),
        "--steps",
        "4",
    ]));
    ok(&cod(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&codb),
        "--output",
        s(&b),
        "--steps",
        "4",
    ]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let bad = dir.path().join("bad.codb");
    let mut bytes = first.clone();
    bytes[0] ^= 0xFF;
    std::fs::write(&bad, &bytes).unwrap();
    let o = cod(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&bad),
        "--output",
        s(&a),
    ]);
    assert_eq!(code(&o), 4);
    std::fs::write(&bad, &first[..first.len() - 1]).unwrap();
    let o = cod(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&bad),
        "--output",
        s(&a),
    ]);
    assert_eq!(code(&o), 4);

    // Checkpoints are also found by name in the cache directory.
    let v = ok(&cod_env(
        &[
            "encode",
            "--checkpoint",
            "low_res_pretrain",
            "--input",
            s(&png),
            "--output",
            s(&codb),
        ],
        &dir.path().join("small"),
    ));
    assert_eq!(v["total_bits"], 16);
}

#[test]
fn base_preset_pipeline_reports_1024_bits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("chain");
    let common = [
        "--synthetic",
        "1",
        "--size",
        "256",
        "--width",
        "16",
        "--steps",
        "1",
        "--batch-size",
        "1",
    ];
    let mut args = vec!["train", "--out", s(&out)];
    args.extend(common);
    let v = ok(&cod(&args));
    let stage1 = v["checkpoint"].as_str().unwrap().to_string();
    let mut args = vec![
        "train",
        "--stage",
        "high_res_pretrain",
        "--init",
        &stage1,
        "--out",
        s(&out),
    ];
    args.extend(common);
    let v = ok(&cod(&args));
    let ckpt = v["checkpoint"].as_str().unwrap().to_string();
    let png = dir.path().join("in.png");
    std::fs::write(
        &png,
        cod_core::data::png_bytes(
            &cod_core::data::Dataset::synthetic(1, 512, 5)
                .all(candle_core::DType::F32, &candle_core::Device::Cpu)
                .unwrap(),
        )
        .unwrap(),
    )
    .unwrap();
    let codb = dir.path().join("a.codb");
    let v = ok(&cod(&[
        "encode",
        "--checkpoint",
        &ckpt,
        "--preset",
        "cod-base",
        "--input",
        s(&png),
        "--output",
        s(&codb),
    ]));
    assert_eq!(v["total_bits"], 1024);
    assert_eq!(v["bpp"], 0.00390625);
    let o = cod(&[
        "encode",
        "--checkpoint",
        &ckpt,
        "--preset",
        "cod-high",
        "--input",
        s(&png),
        "--output",
        s(&codb),
    ]);
    assert_eq!(code(&o), 2);
}

fn csv_of(v: &serde_json::Value) -> String {
    std::fs::read_to_string(v["csv"].as_str().unwrap()).unwrap()
}

#[test]
fn sweeps_and_eval_write_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small_model(dir.path());
    let runs = dir.path().join("runs");
    let args = [
        "sweep",
        "--axis",
        "steps",
        "--values",
        "1,5,25",
        "--checkpoint",
        s(&ckpt),
        "--synthetic",
        "4",
        "--out",
        s(&runs),
    ];
    let v = ok(&cod(&args));
    let csv = csv_of(&v);
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(
        csv.lines().next().unwrap(),
        "axis,bpp,psnr_db,feature_distance,proxy_fid,steps,preset,model_id"
    );
    assert!(Path::new(v["svg"].as_str().unwrap()).exists());
    assert_eq!(csv, csv_of(&ok(&cod(&args))));

    let args = [
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--synthetic",
        "4",
        "--steps",
        "2",
        "--out",
        s(&runs),
    ];
    let e = ok(&cod(&args));
    assert_eq!(csv_of(&e).lines().count(), 2);
    assert_eq!(csv_of(&e), csv_of(&ok(&cod(&args))));

    let v = ok(&cod(&[
        "sweep",
        "--axis",
        "width",
        "--values",
        "32,64",
        "--synthetic",
        "12",
        "--holdout",
        "4",
        "--train-steps",
        "3",
        "--batch-size",
        "4",
        "--steps",
        "2",
        "--out",
        s(&runs),
    ]));
    let csv = csv_of(&v);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("width32") && csv.contains("width64"));

    let v = ok(&cod(&[
        "sweep",
        "--axis",
        "bpp",
        "--checkpoints",
        s(&ckpt),
        "--synthetic",
        "2",
        "--steps",
        "1",
        "--out",
        s(&runs),
    ]));
    assert_eq!(csv_of(&v).lines().count(), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let v = ok(&cod(&[
            "train",
            "--config",
            s(&bundled()),
            "--synthetic",
            "8",
            "--steps",
            "3",
            "--out",
            s(&out),
        ]));
        std::fs::read(v["checkpoint"].as_str().unwrap()).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn distillation_stages_run_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = small_model(dir.path());
    let out = dir.path().join("d");
    let common = ["--synthetic", "4", "--batch-size", "2", "--out", s(&out)];
    let mut args = vec!["distill", "--checkpoint", s(&teacher), "--steps", "10"];
    args.extend(common);
    let v = ok(&cod(&args));
    assert_eq!(v["stage"], "one_step");
    let one_step = v["checkpoint"].as_str().unwrap().to_string();

    let mut args = vec![
        "distill",
        "--stage",
        "full",
        "--checkpoint",
        &one_step,
        "--teacher",
        s(&teacher),
        "--steps",
        "2",
    ];
    args.extend(common);
    assert_eq!(code(&cod(&args)), 2);

    let mut args = vec![
        "distill",
        "--stage",
        "adapters",
        "--checkpoint",
        &one_step,
        "--rank",
        "4",
        "--steps",
        "2",
    ];
    args.extend(common);
    let v = ok(&cod(&args));
    let adapted = v["checkpoint"].as_str().unwrap().to_string();

    let mut args = vec![
        "distill",
        "--stage",
        "full",
        "--checkpoint",
        &adapted,
        "--steps",
        "2",
    ];
    args.extend(common);
    assert_eq!(code(&cod(&args)), 2);
    let mut args = vec![
        "distill",
        "--stage",
        "full",
        "--checkpoint",
        &adapted,
        "--teacher",
        s(&teacher),
        "--steps",
        "10",
    ];
    args.extend(common);
    assert_eq!(ok(&cod(&args))["stage"], "finetune_full");
}
