//! Staged training: AdamW with warmup and linear decay, loss-spike driven
//! LR decay, JSON-lines metrics and resumable checkpoints.

mod ablation;
mod data;
mod eval;
mod optim;
mod schedule;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use ablation::{run_ablation, uniform_schedule, AblationReport, AblationRun};
pub use data::{CachedLatents, Dataset, ToyDataConfig, ToyDataset, TOY_PROMPTS};
pub use eval::{evaluate_toy, ToyEval};
pub use optim::{AdamW, AdamWConfig, StepOutcome};
pub use schedule::{lr_at, LossEvent, SpikeConfig, SpikeDetector};

use crate::container::Container;
use crate::datapipe::Stage;
use crate::error::{Error, Result};
use crate::flow::{icfm_loss, make_flow_batch};
use crate::model::{Dit, ModelConfig, TextEmbedding};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.fdt";
pub const FINAL_FILE: &str = "final.fdt";
pub const METRICS_FILE: &str = "metrics.jsonl";
const MODEL_PREFIX: &str = "model";
const STATE_KEY: &str = "train_state";
const TRAINING_KEY: &str = "training_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub resolution: Stage,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage `{}`: {m}", self.name)));
        if !(self.lr_start >= 0.0) || !(self.lr_end >= 0.0) || self.lr_end > self.lr_start {
            return bad(format!("need 0 <= lr_end <= lr_start, got {} -> {}", self.lr_start, self.lr_end));
        }
        if self.warmup_steps > self.max_steps {
            return bad(format!("warmup_steps {} exceeds max_steps {}", self.warmup_steps, self.max_steps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64, spikes: u32, gamma: f64) -> f64 {
        lr_at(step, self.lr_start, self.lr_end, self.warmup_steps, self.max_steps, spikes, gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Toy(ToyDataConfig),
    LatentCache { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub seed: u64,
    /// Noise scale of the interpolant.
    #[serde(default)]
    pub sigma: f64,
    /// Probability that a sample's prompt is replaced by the empty prompt.
    #[serde(default = "default_dropout")]
    pub cfg_dropout: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub spike: SpikeConfig,
    pub data: DataSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

fn default_dropout() -> f64 {
    0.1
}
fn default_checkpoint_every() -> u64 {
    100
}

impl TrainingConfig {
    /// Parses and validates; errors name the offending field path and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainingConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Config(format!(
                "at `{}` (line {}, column {}): {inner}",
                e.path(),
                inner.line(),
                inner.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.spike.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return Err(Error::Config(format!("cfg_dropout {} outside [0, 1]", self.cfg_dropout)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if let DataSpec::Toy(t) = &self.data {
            if t.channels != self.model.latent_channels {
                return Err(Error::Config(format!(
                    "toy data has {} channels, model expects {}",
                    t.channels, self.model.latent_channels
                )));
            }
            if t.height % self.model.patch_size != 0 || t.width % self.model.patch_size != 0 {
                return Err(Error::Config("toy latent size is not divisible by patch_size".into()));
            }
        }
        Ok(())
    }

    pub fn open_dataset(&self, base: &Path) -> Result<Box<dyn Dataset>> {
        match &self.data {
            DataSpec::Toy(t) => Ok(Box::new(ToyDataset::new(*t)?)),
            DataSpec::LatentCache { dir } => {
                let dir = if dir.is_absolute() { dir.clone() } else { base.join(dir) };
                Ok(Box::new(CachedLatents::open(&dir)?))
            }
        }
    }

    /// CPU-sized run on the eight-class toy task.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        TrainingConfig {
            data: DataSpec::Toy(ToyDataConfig {
                classes: 8,
                channels: model.latent_channels,
                height: 8,
                width: 8,
                spread: 0.1,
                seed: 0,
            }),
            model,
            seed: 0,
            sigma: 0.0,
            cfg_dropout: 0.1,
            optimizer: AdamWConfig::default(),
            spike: SpikeConfig::default(),
            stages: vec![StageSpec {
                name: "toy".into(),
                resolution: Stage::One,
                lr_start: 1e-3,
                lr_end: 1e-4,
                batch_size: 8,
                max_steps: 2000,
                warmup_steps: 100,
            }],
            checkpoint_every: 250,
        }
    }

    /// Full-size reference run: 256² pre-training, then two area-matched
    /// stages. Documentation only.
    pub fn paper_scale() -> Self {
        let stage = |name: &str, resolution, lr_start, lr_end, batch_size| StageSpec {
            name: name.into(),
            resolution,
            lr_start,
            lr_end,
            batch_size,
            max_steps: 100_000,
            warmup_steps: 1_000,
        };
        TrainingConfig {
            model: ModelConfig::paper_scale(),
            seed: 0,
            sigma: 0.0,
            cfg_dropout: 0.1,
            optimizer: AdamWConfig::default(),
            spike: SpikeConfig::default(),
            data: DataSpec::LatentCache { dir: PathBuf::from("cache/stage1") },
            stages: vec![
                stage("pretrain-256", Stage::One, 2e-4, 2e-4, 1024),
                stage("area-250k", Stage::Two, 1e-4, 7e-5, 384),
                stage("area-250k-anneal", Stage::Two, 2e-5, 1e-6, 384),
            ],
            checkpoint_every: 1_000,
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Dit<f32>,
    pub optimizer: AdamW<f32>,
    pub stage_index: usize,
    pub step_in_stage: u64,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub detector: SpikeDetector,
    pub initial_loss: Option<f64>,
    pub spikes_in_stage: u32,
    pub total_spikes: u32,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    stage_index: usize,
    step_in_stage: u64,
    global_step: u64,
    optimizer_step: u64,
    ema_bits: Option<u64>,
    initial_loss_bits: Option<u64>,
    spikes_in_stage: u32,
    total_spikes: u32,
    skipped_steps: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        let model = Dit::new(&cfg.model, cfg.seed)?;
        let params: Vec<Tensor<f32>> = model.trainable_parameters().into_iter().map(|(_, t)| t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            optimizer: AdamW::new(cfg.optimizer, &params),
            model,
            stage_index: 0,
            step_in_stage: 0,
            global_step: 0,
            rng,
            detector: SpikeDetector::new(cfg.spike),
            initial_loss: None,
            spikes_in_stage: 0,
            total_spikes: 0,
            skipped_steps: 0,
        })
    }

    pub fn ema_loss(&self) -> Option<f64> {
        self.detector.ema
    }

    pub fn to_container(&self, cfg: &TrainingConfig) -> Result<Container> {
        let mut c = Container::new();
        self.model.write_to(&mut c, MODEL_PREFIX)?;
        for (i, (name, _)) in self.model.trainable_parameters().iter().enumerate() {
            c.insert(format!("optim.m.{name}"), &Tensor::from_vec(&[self.optimizer.m[i].len()], self.optimizer.m[i].clone())?);
            c.insert(format!("optim.v.{name}"), &Tensor::from_vec(&[self.optimizer.v[i].len()], self.optimizer.v[i].clone())?);
        }
        let meta = StateMeta {
            stage_index: self.stage_index,
            step_in_stage: self.step_in_stage,
            global_step: self.global_step,
            optimizer_step: self.optimizer.step,
            ema_bits: self.detector.ema.map(f64::to_bits),
            initial_loss_bits: self.initial_loss.map(f64::to_bits),
            spikes_in_stage: self.spikes_in_stage,
            total_spikes: self.total_spikes,
            skipped_steps: self.skipped_steps,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        c.meta.insert(STATE_KEY.into(), serde_json::to_value(meta)?);
        c.meta.insert(TRAINING_KEY.into(), serde_json::to_value(cfg)?);
        Ok(c)
    }

    pub fn save(&self, path: &Path, cfg: &TrainingConfig) -> Result<()> {
        self.to_container(cfg)?.save(path)
    }

    /// Restores a state; the checkpoint's model config must equal `cfg.model`.
    pub fn from_container(c: &Container, cfg: &TrainingConfig) -> Result<Self> {
        let model = Dit::<f32>::read_from(c, MODEL_PREFIX, Some(&cfg.model))?;
        let meta: StateMeta = c
            .meta
            .get(STATE_KEY)
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Integrity { tensor: STATE_KEY.into(), reason: "checkpoint has no training state".into() })?;
        let named = model.trainable_parameters();
        let params: Vec<Tensor<f32>> = named.iter().map(|(_, t)| t.clone()).collect();
        let mut optimizer = AdamW::new(cfg.optimizer, &params);
        optimizer.step = meta.optimizer_step;
        for (i, (name, p)) in named.iter().enumerate() {
            for (kind, slot) in [("m", &mut optimizer.m[i]), ("v", &mut optimizer.v[i])] {
                let key = format!("optim.{kind}.{name}");
                let t = c.get::<f32>(&key)?;
                if t.numel() != p.numel() {
                    return Err(Error::Integrity { tensor: key, reason: "optimizer moment size mismatch".into() });
                }
                *slot = t.to_vec();
            }
        }
        let bad_rng = |reason: &str| Error::Integrity { tensor: STATE_KEY.into(), reason: reason.into() };
        let seed: [u8; 32] = hex::decode(&meta.rng_seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad_rng("rng seed is not 32 hex bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos.parse().map_err(|_| bad_rng("rng position unreadable"))?);
        let mut detector = SpikeDetector::new(cfg.spike);
        detector.ema = meta.ema_bits.map(f64::from_bits);
        Ok(TrainState {
            model,
            optimizer,
            stage_index: meta.stage_index,
            step_in_stage: meta.step_in_stage,
            global_step: meta.global_step,
            rng,
            detector,
            initial_loss: meta.initial_loss_bits.map(f64::from_bits),
            spikes_in_stage: meta.spikes_in_stage,
            total_spikes: meta.total_spikes,
            skipped_steps: meta.skipped_steps,
        })
    }

    pub fn load(path: &Path, cfg: &TrainingConfig) -> Result<Self> {
        Self::from_container(&Container::load(path)?, cfg)
    }
}

/// Reads the training config embedded in a checkpoint.
pub fn checkpoint_training_config(c: &Container) -> Result<TrainingConfig> {
    let v = c
        .meta
        .get(TRAINING_KEY)
        .ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub ema_loss: f64,
    pub lr: f64,
    pub spike: bool,
    pub wallclock: f64,
}

/// Append-only JSON-lines log. Opening at step `n` drops any lines past `n`
/// left behind by an interrupted run.
pub struct MetricsLog {
    writer: BufWriter<File>,
    started: Instant,
}

impl MetricsLog {
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if resume_step > 0 {
            if let Ok(f) = File::open(path) {
                for line in BufReader::new(f).lines() {
                    let line = line.map_err(|e| Error::file(path, e))?;
                    let Ok(v) = serde_json::from_str::<Value>(&line) else { continue };
                    if v.get("step").and_then(Value::as_u64).is_some_and(|s| s <= resume_step) {
                        kept.push(line);
                    }
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::file(path, e))?;
        for line in kept {
            writeln!(file, "{line}").map_err(|e| Error::file(path, e))?;
        }
        Ok(MetricsLog { writer: BufWriter::new(file), started: Instant::now() })
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn write(&mut self, line: &MetricsLine) -> Result<()> {
        serde_json::to_writer(&mut self.writer, line)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.writer.flush()?)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Where a run writes and when it stops early.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints and metrics; `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
    /// Stop once this many global steps are done (a checkpoint is written).
    pub stop_at_step: Option<u64>,
    /// Record every step's loss in [`RunSummary::losses`].
    pub keep_losses: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub initial_loss: Option<f64>,
    pub final_ema: Option<f64>,
    pub spikes: u32,
    pub skipped_steps: u64,
    pub completed: bool,
    pub losses: Vec<f64>,
    pub ema_losses: Vec<f64>,
}

struct PromptCache<'a> {
    model: &'a Dit<f32>,
    cache: HashMap<String, TextEmbedding<f32>>,
}

impl PromptCache<'_> {
    fn get(&mut self, prompt: &str) -> Result<&TextEmbedding<f32>> {
        if !self.cache.contains_key(prompt) {
            let e = self.model.encode_prompt(prompt)?;
            self.cache.insert(prompt.to_string(), e);
        }
        Ok(&self.cache[prompt])
    }
}

/// Runs the remaining steps of the current stage.
pub fn run_stage(
    state: &mut TrainState,
    cfg: &TrainingConfig,
    dataset: &dyn Dataset,
    log: Option<&mut MetricsLog>,
    opts: &RunOptions,
    summary: &mut RunSummary,
) -> Result<bool> {
    let stage = cfg
        .stages
        .get(state.stage_index)
        .ok_or_else(|| Error::Contract(format!("no stage {}", state.stage_index)))?
        .clone();
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if !dataset.supports(stage.resolution) {
        return Err(Error::Config(format!(
            "dataset was not prepared for the resolution of stage `{}`",
            stage.name
        )));
    }
    let mut log = log;
    let params: Vec<Tensor<f32>> = state.model.trainable_parameters().into_iter().map(|(_, t)| t).collect();
    let model = state.model.clone();
    let mut prompts = PromptCache { model: &model, cache: HashMap::new() };
    while state.step_in_stage < stage.max_steps {
        if opts.stop_at_step.is_some_and(|s| state.global_step >= s) {
            return Ok(false);
        }
        let (x1, mut texts) = dataset.batch(stage.batch_size, &mut state.rng)?;
        for t in texts.iter_mut() {
            if state.rng.random::<f64>() < cfg.cfg_dropout {
                t.clear();
            }
        }
        let batch = make_flow_batch(&x1, &mut state.rng, cfg.sigma)?;
        for t in &texts {
            prompts.get(t)?;
        }
        let embeds: Vec<&TextEmbedding<f32>> = texts.iter().map(|t| &prompts.cache[t.as_str()]).collect();

        for p in &params {
            p.zero_grad();
        }
        let loss = icfm_loss(&state.model, &batch, &embeds)?;
        let loss_value = loss.item()?.as_f64();
        let lr = stage.lr_at(state.step_in_stage, state.spikes_in_stage, cfg.spike.gamma);
        let outcome = if loss_value.is_finite() {
            loss.backward()?;
            state.optimizer.step(&params, lr)?
        } else {
            StepOutcome::SkippedNonFinite
        };
        if outcome == StepOutcome::SkippedNonFinite {
            state.skipped_steps += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped", state.global_step + 1);
        }
        state.initial_loss.get_or_insert(loss_value);
        let event = state.detector.observe(loss_value);
        let spike = event == LossEvent::Spike;
        if spike {
            state.spikes_in_stage += 1;
            state.total_spikes += 1;
            log::warn!("step {}: loss spike ({loss_value:.4}), lr decayed", state.global_step + 1);
        }
        state.step_in_stage += 1;
        state.global_step += 1;
        let ema = state.detector.ema.unwrap_or(f64::NAN);
        if opts.keep_losses {
            summary.losses.push(loss_value);
            summary.ema_losses.push(ema);
        }
        summary.steps += 1;
        if let Some(log) = log.as_deref_mut() {
            log.write(&MetricsLine {
                step: state.global_step,
                stage: stage.name.clone(),
                loss: loss_value,
                ema_loss: ema,
                lr,
                spike,
                wallclock: log.elapsed(),
            })?;
        }
        if state.global_step.is_multiple_of(cfg.checkpoint_every) {
            save_progress(state, cfg, opts, log.as_deref_mut())?;
        }
    }
    state.stage_index += 1;
    state.step_in_stage = 0;
    state.spikes_in_stage = 0;
    Ok(true)
}

fn save_progress(state: &TrainState, cfg: &TrainingConfig, opts: &RunOptions, log: Option<&mut MetricsLog>) -> Result<()> {
    if let Some(log) = log {
        log.flush()?;
    }
    if let Some(dir) = &opts.output_dir {
        state.save(&dir.join(CHECKPOINT_FILE), cfg)?;
    }
    Ok(())
}

/// Runs every remaining stage. With an output directory, metrics go to
/// `metrics.jsonl`, periodic checkpoints to `checkpoint.fdt` and the
/// completed model to `final.fdt`.
pub fn train(state: &mut TrainState, cfg: &TrainingConfig, dataset: &dyn Dataset, opts: &RunOptions) -> Result<RunSummary> {
    let mut log = match &opts.output_dir {
        Some(dir) => Some(MetricsLog::open(&dir.join(METRICS_FILE), state.global_step)?),
        None => None,
    };
    let mut summary = RunSummary::default();
    let mut completed = true;
    while state.stage_index < cfg.stages.len() {
        log::info!("stage {} ({})", state.stage_index, cfg.stages[state.stage_index].name);
        if !run_stage(state, cfg, dataset, log.as_mut(), opts, &mut summary)? {
            completed = false;
            break;
        }
    }
    save_progress(state, cfg, opts, log.as_mut())?;
    if completed {
        if let Some(dir) = &opts.output_dir {
            state.save(&dir.join(FINAL_FILE), cfg)?;
        }
    }
    summary.initial_loss = state.initial_loss;
    summary.final_ema = state.detector.ema;
    summary.spikes = state.total_spikes;
    summary.skipped_steps = state.skipped_steps;
    summary.completed = completed;
    Ok(summary)
}
