//! Command-line surface: `train`, `sample`, `dedup`, `score` and `prep`.
//!
//! Every subcommand writes machine-readable JSON. Exit codes: 0 success,
//! 1 usage or configuration, 2 data integrity, 3 runtime.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::datapipe::{
    annotate_scores, build_latent_cache, dedup_converge, read_embeddings, read_manifest, write_atomic,
    write_manifest, CacheOptions, DedupConfig, QualityTag, Stage,
};
use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig};
use crate::model::{Dit, IdentityAdapter, LatentAdapter, ModelConfig};
use crate::trainer::{checkpoint_training_config, train, RunOptions, TrainState, TrainingConfig};

/// Environment variable naming the default latent cache directory.
pub const CACHE_DIR_ENV: &str = "FLOWDIT_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "flowdit", version, about = "Flow-matching diffusion transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON config, optionally resuming from a checkpoint.
    Train(TrainArgs),
    /// Generate PNG images from prompts with a trained checkpoint.
    Sample(SampleArgs),
    /// Near-duplicate removal over an embeddings file.
    Dedup(DedupArgs),
    /// Attach quality tags to scored manifest records.
    Score(ScoreArgs),
    /// Resize images for a training stage and build the latent cache.
    Prep(PrepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long = "output_dir", alias = "output-dir", default_value = "runs")]
    pub output_dir: PathBuf,
}

/// `[height, width]`, accepted with or without brackets and quotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl std::str::FromStr for ImageSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let inner = unquote(s);
        let inner = inner.strip_prefix('[').and_then(|r| r.strip_suffix(']')).unwrap_or(inner);
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let [h, w] = parts[..] else {
            return Err(format!("expected [height,width], got `{s}`"));
        };
        let parse = |v: &str| v.parse::<usize>().map_err(|_| format!("`{v}` is not a positive integer"));
        let (height, width) = (parse(h)?, parse(w)?);
        if height == 0 || width == 0 {
            return Err("image size must be positive".into());
        }
        Ok(ImageSize { height, width })
    }
}

fn unquote(s: &str) -> &str {
    s.trim().trim_matches(|c| c == '\'' || c == '"').trim()
}

fn parse_scale(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = unquote(s).parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub prompts: Vec<String>,
    /// Replaces the unconditional branch of guidance.
    #[arg(long = "negative_prompt", alias = "negative-prompt")]
    pub negative_prompt: Option<String>,
    #[arg(long = "image_size", alias = "image-size", default_value = "[256,256]")]
    pub image_size: ImageSize,
    #[arg(long = "cfg_scale", alias = "cfg-scale", default_value_t = 5.0, value_parser = parse_scale)]
    pub cfg_scale: f64,
    #[arg(long = "model_path", alias = "model-path")]
    pub model_path: PathBuf,
    #[arg(long = "output_dir", alias = "output-dir", default_value = "samples")]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Base seed; prompt `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pixels per latent cell of the adapter.
    #[arg(long = "latent_factor", alias = "latent-factor", default_value_t = 8)]
    pub latent_factor: usize,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Embedding container (`vectors` tensor plus `ids` metadata).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Manifest to filter down to the representatives.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "output_dir", alias = "output-dir", default_value = "dedup")]
    pub output_dir: PathBuf,
    #[arg(long = "sim_threshold", alias = "sim-threshold", default_value_t = 0.9)]
    pub sim_threshold: f64,
    #[arg(long = "min_pts", alias = "min-pts", default_value_t = 2)]
    pub min_pts: usize,
    #[arg(long = "partition_size", alias = "partition-size", default_value_t = 1024)]
    pub partition_size: usize,
    #[arg(long = "max_rounds", alias = "max-rounds", default_value_t = 16)]
    pub max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Annotated manifest; defaults to rewriting the input.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// 1 = square 256 crop, 2 = area-matched multiple-of-64.
    #[arg(long, default_value_t = 1)]
    pub stage: u8,
    /// Defaults to `$FLOWDIT_CACHE_DIR`, then `cache`.
    #[arg(long = "output_dir", alias = "output-dir")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "latent_factor", alias = "latent-factor", default_value_t = 8)]
    pub latent_factor: usize,
    #[arg(long = "latent_channels", alias = "latent-channels", default_value_t = 16)]
    pub latent_channels: usize,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            let report = serde_json::json!({"error": e.to_string(), "exit_code": e.exit_code()});
            eprintln!("{report}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; the returned string is the JSON summary for stdout.
pub fn run(cli: Cli) -> Result<String> {
    let value = match cli.command {
        Command::Train(a) => serde_json::to_value(cmd_train(&a)?)?,
        Command::Sample(a) => serde_json::to_value(cmd_sample(&a)?)?,
        Command::Dedup(a) => serde_json::to_value(cmd_dedup(&a)?)?,
        Command::Score(a) => serde_json::to_value(cmd_score(&a)?)?,
        Command::Prep(a) => serde_json::to_value(cmd_prep(&a)?)?,
    };
    Ok(value.to_string())
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutput {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub steps_run: u64,
    pub global_step: u64,
    pub initial_loss: Option<f64>,
    pub final_ema: Option<f64>,
    pub spikes: u32,
    pub skipped_steps: u64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let cfg = TrainingConfig::load(&args.config)?;
    let dataset = cfg.open_dataset(&base_dir(&args.config))?;
    let mut state = match &args.resume {
        Some(path) => {
            let container = Container::load(path)?;
            let saved = checkpoint_training_config(&container)?;
            if saved.stages != cfg.stages || saved.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "{} was written by a run with different stages or seed",
                    path.display()
                )));
            }
            TrainState::from_container(&container, &cfg)?
        }
        None => TrainState::new(&cfg)?,
    };
    let opts = RunOptions { output_dir: Some(args.output_dir.clone()), ..RunOptions::default() };
    let summary = train(&mut state, &cfg, dataset.as_ref(), &opts)?;
    Ok(TrainOutput {
        checkpoint: args.output_dir.join(crate::trainer::FINAL_FILE),
        output_dir: args.output_dir.clone(),
        steps_run: summary.steps,
        global_step: state.global_step,
        initial_loss: summary.initial_loss,
        final_ema: summary.final_ema,
        spikes: summary.spikes,
        skipped_steps: summary.skipped_steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub cfg_scale: f64,
    pub image_size: ImageSize,
    pub file: String,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub model_path: PathBuf,
    pub checkpoint_sha256: String,
    pub samples: Vec<SampleRecord>,
}

/// Latent grid for an image size, or an error naming the required multiple.
pub fn latent_grid(size: ImageSize, config: &ModelConfig, latent_factor: usize) -> Result<(usize, usize)> {
    if latent_factor == 0 {
        return Err(Error::Config("latent_factor must be >= 1".into()));
    }
    let multiple = config.patch_size * latent_factor;
    let bad: Vec<String> = [("height", size.height), ("width", size.width)]
        .iter()
        .filter(|(_, v)| v % multiple != 0)
        .map(|(n, v)| format!("{n} {v}"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(format!(
            "{} not divisible by {multiple} (patch size {} x latent factor {latent_factor}); \
             valid sizes are multiples of {multiple}",
            bad.join(" and "),
            config.patch_size
        )));
    }
    Ok((size.height / latent_factor, size.width / latent_factor))
}

fn slug(prompt: &str) -> String {
    let s: String = prompt
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
    let s: String = s.chars().take(40).collect();
    if s.is_empty() {
        "untitled".into()
    } else {
        s
    }
}

pub fn cmd_sample(args: &SampleArgs) -> Result<SampleManifest> {
    let sampler = SamplerConfig { steps: args.steps, cfg_scale: args.cfg_scale, seed: args.seed };
    sampler.validate()?;
    let bytes = fs::read(&args.model_path).map_err(|e| Error::file(&args.model_path, e))?;
    let checkpoint_sha256 = hex::encode(Sha256::digest(&bytes));
    let container = Container::from_bytes(&bytes)?;
    let model = Dit::<f32>::read_from(&container, "model", None)?;
    let (lh, lw) = latent_grid(args.image_size, &model.config, args.latent_factor)?;
    let adapter = IdentityAdapter::new(model.config.latent_channels, args.latent_factor);
    let uncond = model.encode_prompt(args.negative_prompt.as_deref().unwrap_or(""))?;
    fs::create_dir_all(&args.output_dir).map_err(|e| Error::file(&args.output_dir, e))?;
    let mut samples = Vec::with_capacity(args.prompts.len());
    for (i, prompt) in args.prompts.iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        let text = model.encode_prompt(prompt)?;
        let cfg = SamplerConfig { seed, ..sampler };
        let latent = sample(&model, &text, &uncond, &[model.config.latent_channels, lh, lw], &cfg)?;
        let img = adapter.decode(&latent)?;
        let file = format!("{i:03}_{}_seed{seed}.png", slug(prompt));
        let path = args.output_dir.join(&file);
        img.save_with_format(&path, image::ImageFormat::Png)?;
        log::info!("wrote {}", path.display());
        samples.push(SampleRecord {
            prompt: prompt.clone(),
            negative_prompt: args.negative_prompt.clone(),
            seed,
            steps: args.steps,
            cfg_scale: args.cfg_scale,
            image_size: args.image_size,
            file,
            checkpoint_sha256: checkpoint_sha256.clone(),
        });
    }
    let manifest = SampleManifest { model_path: args.model_path.clone(), checkpoint_sha256, samples };
    write_atomic(&args.output_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupOutput {
    pub report: PathBuf,
    pub manifest: Option<PathBuf>,
    pub converged: bool,
    pub input_size: usize,
    pub representatives: usize,
}

pub fn cmd_dedup(args: &DedupArgs) -> Result<DedupOutput> {
    let cfg = DedupConfig {
        sim_threshold: args.sim_threshold,
        min_pts: args.min_pts,
        partition_size: args.partition_size,
        max_rounds: args.max_rounds,
        seed: args.seed,
    };
    cfg.validate()?;
    let records = read_embeddings(&args.embeddings)?;
    let report = dedup_converge(&records, &cfg)?;
    let report_path = args.output_dir.join("dedup_report.json");
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    let manifest = match &args.manifest {
        Some(path) => {
            let keep: std::collections::HashSet<&str> = report.representatives.iter().map(String::as_str).collect();
            let kept: Vec<_> = read_manifest(path)?.into_iter().filter(|r| keep.contains(r.id.as_str())).collect();
            let out = args.output_dir.join("manifest.jsonl");
            write_manifest(&out, &kept)?;
            Some(out)
        }
        None => None,
    };
    Ok(DedupOutput {
        report: report_path,
        manifest,
        converged: report.converged,
        input_size: report.input_size,
        representatives: report.representatives.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub manifest: PathBuf,
    pub records: usize,
    pub unscored: usize,
    pub tags: std::collections::BTreeMap<QualityTag, usize>,
}

pub fn cmd_score(args: &ScoreArgs) -> Result<ScoreOutput> {
    let mut records = read_manifest(&args.manifest)?;
    annotate_scores(&mut records)?;
    let out = args.output.clone().unwrap_or_else(|| args.manifest.clone());
    write_manifest(&out, &records)?;
    let mut tags = std::collections::BTreeMap::new();
    for tag in records.iter().filter_map(|r| r.quality_tag) {
        *tags.entry(tag).or_insert(0) += 1;
    }
    Ok(ScoreOutput {
        manifest: out,
        records: records.len(),
        unscored: records.iter().filter(|r| r.quality_score.is_none()).count(),
        tags,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepOutput {
    pub output_dir: PathBuf,
    pub rewritten: bool,
    pub entries: usize,
    pub skipped: usize,
    pub errors: usize,
}

pub fn cmd_prep(args: &PrepArgs) -> Result<PrepOutput> {
    let stage = Stage::from_number(args.stage)?;
    let records = read_manifest(&args.manifest)?;
    let out_dir = match &args.output_dir {
        Some(d) => d.clone(),
        None => std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("cache")),
    };
    if args.latent_factor == 0 || args.latent_channels == 0 {
        return Err(Error::Config("latent_factor and latent_channels must be >= 1".into()));
    }
    let adapter = IdentityAdapter::new(args.latent_channels, args.latent_factor);
    let manifest = build_latent_cache(
        &records,
        &base_dir(&args.manifest),
        &adapter as &dyn LatentAdapter,
        &out_dir,
        &CacheOptions { stage, seed: args.seed },
    )?;
    if !manifest.errors.is_empty() {
        let list: Vec<String> = manifest.errors.iter().map(|e| format!("{}: {}", e.id, e.reason)).collect();
        return Err(Error::Validation(format!(
            "{} of {} records failed (cache written without them): {}",
            manifest.errors.len(),
            records.len(),
            list.join("; ")
        )));
    }
    Ok(PrepOutput {
        output_dir: out_dir,
        rewritten: manifest.rewritten,
        entries: manifest.entries.len(),
        skipped: manifest.skipped.len(),
        errors: 0,
    })
}
