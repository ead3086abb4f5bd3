use serde::{Deserialize, Serialize};

use super::{train, RunOptions, TrainState, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// One training run of the head-count comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub label: String,
    pub head_schedule: Vec<usize>,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub ema_losses: Vec<f64>,
    pub initial_loss: Option<f64>,
    pub final_ema: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: u64,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    /// Mean final EMA loss per label, in run order.
    pub mean_final_ema: Vec<(String, f64)>,
}

/// Same head count in every layer, rounded mean of the schedule.
pub fn uniform_schedule(model: &ModelConfig) -> Vec<usize> {
    let n = model.head_schedule.len().max(1);
    let mean = (model.head_schedule.iter().sum::<usize>() as f64 / n as f64).round() as usize;
    vec![mean.max(1); model.layers]
}

/// Trains the configured schedule and a uniform-head baseline with identical
/// seeds, data and budget, and collects the loss curves.
pub fn run_ablation(base: &TrainingConfig, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut uniform = base.clone();
    uniform.model.head_schedule = uniform_schedule(&base.model);
    uniform.validate()?;
    base.validate()?;
    let variants = [("uniform", uniform), ("multi-head-schedule", base.clone())];
    let dataset = base.open_dataset(std::path::Path::new("."))?;
    let mut runs = Vec::new();
    for (label, cfg) in &variants {
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let mut state = TrainState::new(&cfg)?;
            let opts = RunOptions { keep_losses: true, ..RunOptions::default() };
            let s = train(&mut state, &cfg, dataset.as_ref(), &opts)?;
            log::info!("ablation {label} seed {seed}: final ema {:?}", s.final_ema);
            runs.push(AblationRun {
                label: label.to_string(),
                head_schedule: cfg.model.head_schedule.clone(),
                seed,
                losses: s.losses,
                ema_losses: s.ema_losses,
                initial_loss: s.initial_loss,
                final_ema: s.final_ema,
            });
        }
    }
    let mean_final_ema = variants
        .iter()
        .map(|(label, _)| {
            let v: Vec<f64> = runs.iter().filter(|r| r.label == *label).filter_map(|r| r.final_ema).collect();
            (label.to_string(), v.iter().sum::<f64>() / v.len().max(1) as f64)
        })
        .collect();
    Ok(AblationReport {
        steps: base.stages.iter().map(|s| s.max_steps).sum(),
        seeds: seeds.to_vec(),
        runs,
        mean_final_ema,
    })
}
