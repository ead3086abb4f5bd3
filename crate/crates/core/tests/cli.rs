use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowdit::container::Container;
use flowdit::datapipe::{read_manifest, write_embeddings, EmbeddingRecord, QualityTag, CACHE_MANIFEST};
use flowdit::model::ModelConfig;
use flowdit::trainer::{train, DataSpec, RunOptions, TrainState, TrainingConfig, CHECKPOINT_FILE, FINAL_FILE, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn flowdit<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_flowdit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn flowdit")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary json")
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn tiny_config(steps: u64) -> TrainingConfig {
    let mut cfg = TrainingConfig::desk();
    cfg.model = ModelConfig::tiny();
    if let DataSpec::Toy(t) = &mut cfg.data {
        t.channels = 4;
        t.height = 4;
        t.width = 4;
    }
    cfg.stages[0].max_steps = steps;
    cfg.stages[0].warmup_steps = 5;
    cfg.checkpoint_every = 10;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &TrainingConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn metric_steps(dir: &Path) -> Vec<u64> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect()
}

fn model_bytes(path: &Path) -> Vec<(String, Vec<u8>)> {
    let c = Container::load(path).unwrap();
    c.tensors.into_iter().filter(|(k, _)| k.starts_with("model.")).map(|(k, e)| (k, e.bytes)).collect()
}

#[test]
fn train_writes_one_metrics_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny_config(25));
    let run = dir.path().join("run");
    let summary = stdout_json(&flowdit([
        "train".as_ref(),
        "--config".as_ref(),
        cfg.as_os_str(),
        "--output_dir".as_ref(),
        run.as_os_str(),
    ]));
    assert_eq!(summary["steps_run"], 25);
    assert_eq!(metric_steps(&run), (1..=25).collect::<Vec<_>>());
    assert!(run.join(FINAL_FILE).exists() && run.join(CHECKPOINT_FILE).exists());
}

#[test]
fn resume_continues_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(30);
    let cfg_path = write_config(dir.path(), "c.json", &cfg);
    let data = match &cfg.data {
        DataSpec::Toy(t) => flowdit::trainer::ToyDataset::new(*t).unwrap(),
        _ => unreachable!(),
    };

    let resumed = dir.path().join("resumed");
    let mut state = TrainState::new(&cfg).unwrap();
    let stop = RunOptions { output_dir: Some(resumed.clone()), stop_at_step: Some(12), keep_losses: false };
    train(&mut state, &cfg, &data, &stop).unwrap();
    assert!(!resumed.join(FINAL_FILE).exists());

    let ckpt = resumed.join(CHECKPOINT_FILE);
    let out = flowdit([
        "train".as_ref(),
        "--config".as_ref(),
        cfg_path.as_os_str(),
        "--resume".as_ref(),
        ckpt.as_os_str(),
        "--output_dir".as_ref(),
        resumed.as_os_str(),
    ]);
    assert_eq!(stdout_json(&out)["global_step"], 30);
    assert_eq!(metric_steps(&resumed), (1..=30).collect::<Vec<_>>());

    let straight = dir.path().join("straight");
    let out = flowdit([
        "train".as_ref(),
        "--config".as_ref(),
        cfg_path.as_os_str(),
        "--output_dir".as_ref(),
        straight.as_os_str(),
    ]);
    stdout_json(&out);
    assert_eq!(model_bytes(&resumed.join(FINAL_FILE)), model_bytes(&straight.join(FINAL_FILE)));
}

#[test]
fn resume_with_other_head_schedule_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(10);
    let cfg_path = write_config(dir.path(), "c.json", &cfg);
    let run = dir.path().join("run");
    stdout_json(&flowdit([
        "train".as_ref(),
        "--config".as_ref(),
        cfg_path.as_os_str(),
        "--output_dir".as_ref(),
        run.as_os_str(),
    ]));
    let mut other = cfg.clone();
    other.model.head_schedule = vec![4, 2];
    let other_path = write_config(dir.path(), "other.json", &other);
    let out = flowdit([
        "train".as_ref(),
        "--config".as_ref(),
        other_path.as_os_str(),
        "--resume".as_ref(),
        run.join(CHECKPOINT_FILE).as_os_str(),
        "--output_dir".as_ref(),
        run.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 1);
    assert!(err["error"].as_str().unwrap().contains("head_schedule"), "{err}");
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(tiny_config(5)).unwrap();
    v["stages"][0]["lr_start"] = Value::String("fast".into());
    let path = dir.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = flowdit(["train".as_ref(), "--config".as_ref(), path.as_os_str()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["error"].as_str().unwrap().contains("stages[0].lr_start"));
}

#[test]
fn score_tags_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        "{\"id\":\"a\",\"image\":\"a.png\",\"caption\":\"cat\",\"quality_score\":7.0}\n\
         {\"id\":\"b\",\"image\":\"b.png\",\"quality_score\":3.9}\n\
         {\"id\":\"c\",\"image\":\"c.png\"}\n",
    )
    .unwrap();
    let summary = stdout_json(&flowdit(["score".as_ref(), "--manifest".as_ref(), manifest.as_os_str()]));
    assert_eq!(summary["unscored"], 1);
    let recs = read_manifest(&manifest).unwrap();
    assert_eq!(recs[0].quality_tag, Some(QualityTag::Excellent));
    assert_eq!(recs[0].prompt(), "cat excellent");
    assert_eq!(recs[1].quality_tag, Some(QualityTag::Excluded));
    assert_eq!(recs[2].quality_tag, None);
}

#[test]
fn dedup_collapses_planted_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gauss = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let mut records = Vec::new();
    for g in 0..20 {
        let centre = gauss(32);
        for m in 0..3 {
            let v: Vec<f32> = centre.iter().zip(gauss(32)).map(|(c, n)| c + 0.02 * n).collect();
            records.push(EmbeddingRecord::normalized(format!("{m}-{g:02}"), v).unwrap());
        }
    }
    let emb = dir.path().join("emb.fdt");
    write_embeddings(&emb, &records).unwrap();
    let out_dir = dir.path().join("out");
    let summary = stdout_json(&flowdit([
        "dedup".as_ref(),
        "--embeddings".as_ref(),
        emb.as_os_str(),
        "--partition_size".as_ref(),
        "64".as_ref(),
        "--output_dir".as_ref(),
        out_dir.as_os_str(),
    ]));
    assert_eq!(summary["representatives"], 20);
    assert_eq!(summary["converged"], true);
    let report: Value = serde_json::from_slice(&fs::read(out_dir.join("dedup_report.json")).unwrap()).unwrap();
    assert!(report["rounds"].as_array().unwrap().len() >= 2);
}

#[test]
fn prep_skips_extreme_aspect_ratios() {
    let dir = tempfile::tempdir().unwrap();
    image::RgbImage::from_pixel(96, 64, image::Rgb([200, 10, 10])).save(dir.path().join("wide.png")).unwrap();
    image::RgbImage::from_pixel(32, 128, image::Rgb([10, 10, 200])).save(dir.path().join("tall.png")).unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(
        &manifest,
        "{\"id\":\"wide\",\"image\":\"wide.png\",\"caption\":\"red\"}\n{\"id\":\"tall\",\"image\":\"tall.png\"}\n",
    )
    .unwrap();
    let out_dir = dir.path().join("cache");
    let summary = stdout_json(&flowdit([
        "prep".as_ref(),
        "--manifest".as_ref(),
        manifest.as_os_str(),
        "--stage".as_ref(),
        "2".as_ref(),
        "--output_dir".as_ref(),
        out_dir.as_os_str(),
    ]));
    assert_eq!((summary["entries"].as_u64(), summary["skipped"].as_u64()), (Some(1), Some(1)));
    let cache: Value = serde_json::from_slice(&fs::read(out_dir.join(CACHE_MANIFEST)).unwrap()).unwrap();
    assert_eq!(cache["skipped"][0]["id"], "tall");
    let shape = &cache["entries"][0]["shape"];
    assert_eq!(shape[1].as_u64().unwrap() * 8 % 64, 0, "{shape}");
    assert_eq!(shape[2].as_u64().unwrap() * 8 % 64, 0, "{shape}");
}

#[test]
fn prep_falls_back_to_cache_dir_variable() {
    let dir = tempfile::tempdir().unwrap();
    image::RgbImage::from_pixel(64, 64, image::Rgb([1, 2, 3])).save(dir.path().join("a.png")).unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(&manifest, "{\"id\":\"a\",\"image\":\"a.png\"}\n").unwrap();
    let cache = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_flowdit"))
        .args(["prep".as_ref(), "--manifest".as_ref(), manifest.as_os_str()])
        .env(flowdit::cli::CACHE_DIR_ENV, &cache)
        .output()
        .unwrap();
    stdout_json(&out);
    assert!(cache.join(CACHE_MANIFEST).exists());
}

#[test]
fn sample_rejects_bad_sizes_and_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.fdt");
    let out = flowdit([
        "sample".as_ref(),
        "--prompts".as_ref(),
        "x".as_ref(),
        "--model_path".as_ref(),
        missing.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = tiny_config(1);
    let model = flowdit::model::Dit::<f32>::new(&cfg.model, 0).unwrap();
    let mut c = Container::new();
    model.write_to(&mut c, "model").unwrap();
    let ckpt = dir.path().join("tiny.fdt");
    c.save(&ckpt).unwrap();
    let out = flowdit([
        "sample".as_ref(),
        "--prompts".as_ref(),
        "x".as_ref(),
        "--image_size".as_ref(),
        "[417,736]".as_ref(),
        "--model_path".as_ref(),
        ckpt.as_os_str(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr_json(&out)["error"].as_str().unwrap().to_owned();
    assert!(msg.contains("417") && msg.contains("16"), "{msg}");

    let out = flowdit(["sample", "--prompts", "x", "--cfg_scale", "-1", "--model_path", "m.fdt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sample_writes_manifest_and_negative_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let model = flowdit::model::Dit::<f32>::new(&ModelConfig::tiny(), 3).unwrap();
    model.randomize(4, 0.2);
    let mut c = Container::new();
    model.write_to(&mut c, "model").unwrap();
    let ckpt = dir.path().join("tiny.fdt");
    c.save(&ckpt).unwrap();
    let run = |out: &Path, negative: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowdit"));
        cmd.args(["sample", "--prompts", "red circle", "--image_size", "[32,64]", "--steps", "4"])
            .arg("--model_path")
            .arg(&ckpt)
            .arg("--output_dir")
            .arg(out);
        if let Some(n) = negative {
            cmd.args(["--negative_prompt", n]);
        }
        stdout_json(&cmd.output().unwrap())
    };
    let plain = run(&dir.path().join("plain"), None);
    let neg = run(&dir.path().join("neg"), Some("low quality"));
    let file = plain["samples"][0]["file"].as_str().unwrap();
    assert_eq!(file, "000_red-circle_seed0.png");
    let a = fs::read(dir.path().join("plain").join(file)).unwrap();
    let b = fs::read(dir.path().join("neg").join(file)).unwrap();
    assert_ne!(a, b);
    assert_eq!(neg["samples"][0]["negative_prompt"], "low quality");
    let img = image::load_from_memory(&a).unwrap();
    assert_eq!((img.width(), img.height()), (64, 32));
}
