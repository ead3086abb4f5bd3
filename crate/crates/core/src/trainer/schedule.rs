use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate after `step` completed steps of a stage: linear warmup
/// from 0 to `lr_start`, linear decay to `lr_end` at `max_steps`, scaled by
/// `gamma^spikes`.
pub fn lr_at(step: u64, lr_start: f64, lr_end: f64, warmup: u64, max_steps: u64, spikes: u32, gamma: f64) -> f64 {
    let base = if step < warmup {
        lr_start * step as f64 / warmup as f64
    } else if max_steps <= warmup {
        lr_start
    } else {
        let frac = ((step - warmup) as f64 / (max_steps - warmup) as f64).min(1.0);
        lr_start + (lr_end - lr_start) * frac
    };
    base * gamma.powi(spikes as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    #[serde(default = "ema_decay")]
    pub ema_decay: f64,
    /// A loss above `k · EMA` is a spike.
    #[serde(default = "k")]
    pub k: f64,
    /// LR multiplier applied per spike.
    #[serde(default = "gamma")]
    pub gamma: f64,
}

fn ema_decay() -> f64 {
    0.9
}
fn k() -> f64 {
    3.0
}
fn gamma() -> f64 {
    0.7
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig { ema_decay: ema_decay(), k: k(), gamma: gamma() }
    }
}

impl SpikeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.k > 1.0) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "spike settings need 0 <= ema_decay < 1, k > 1, 0 < gamma <= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossEvent {
    Normal,
    Spike,
}

/// Exponential moving average of the loss, seeded with the first value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeDetector {
    pub config: SpikeConfig,
    pub ema: Option<f64>,
}

impl SpikeDetector {
    pub fn new(config: SpikeConfig) -> Self {
        SpikeDetector { config, ema: None }
    }

    /// Classifies `loss` against the EMA so far, then folds it in. A
    /// non-finite loss is a spike and leaves the EMA untouched.
    pub fn observe(&mut self, loss: f64) -> LossEvent {
        if !loss.is_finite() {
            return LossEvent::Spike;
        }
        let Some(ema) = self.ema else {
            self.ema = Some(loss);
            return LossEvent::Normal;
        };
        let event = if loss > self.config.k * ema { LossEvent::Spike } else { LossEvent::Normal };
        let d = self.config.ema_decay;
        self.ema = Some(d * ema + (1.0 - d) * loss);
        event
    }
}
