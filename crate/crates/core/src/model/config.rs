use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockSpec, DEFAULT_ROPE_THETA};

/// Head counts for the four contiguous depth groups, shallow to deep.
pub const HEAD_GROUPS: [usize; 4] = [8, 16, 24, 48];

/// Default per-layer head counts: four equal contiguous groups with
/// 8, 16, 24 and 48 heads, few heads early and many late.
pub fn head_schedule_default(layers: usize) -> Result<Vec<usize>> {
    if layers == 0 || !layers.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "default head schedule needs a layer count divisible by 4, got {layers}; \
             set `head_schedule` explicitly"
        )));
    }
    let per_group = layers / 4;
    Ok(HEAD_GROUPS
        .iter()
        .flat_map(|&h| std::iter::repeat_n(h, per_group))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    /// Attention head count per layer.
    pub head_schedule: Vec<usize>,
    pub mlp_hidden_dim: usize,
    pub patch_size: usize,
    pub latent_channels: usize,
    pub text_embed_dim: usize,
    /// Upper bound on text tokens, BOS included.
    pub max_text_tokens: usize,
    pub vocab_hash_size: usize,
    #[serde(default = "default_time_freq_dim")]
    pub time_freq_dim: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    /// Add a projection of the mean text embedding to the timestep
    /// conditioning vector.
    #[serde(default)]
    pub pooled_text_conditioning: bool,
}

fn default_time_freq_dim() -> usize {
    64
}
fn default_norm_eps() -> f64 {
    1e-6
}
fn default_rope_theta() -> f64 {
    DEFAULT_ROPE_THETA
}

impl ModelConfig {
    /// CPU-sized configuration exercising every mechanism.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 8,
            model_dim: 192,
            head_schedule: head_schedule_default(8).expect("8 layers"),
            mlp_hidden_dim: 512,
            patch_size: 2,
            latent_channels: 16,
            text_embed_dim: 64,
            max_text_tokens: 16,
            vocab_hash_size: 4096,
            time_freq_dim: 64,
            norm_eps: 1e-6,
            rope_theta: DEFAULT_ROPE_THETA,
            pooled_text_conditioning: false,
        }
    }

    /// Full-size reference configuration (32 layers, patch 2, 16-channel
    /// latents). Documentation only; far too large to train here.
    pub fn paper_scale() -> Self {
        ModelConfig {
            layers: 32,
            model_dim: 1536,
            head_schedule: head_schedule_default(32).expect("32 layers"),
            mlp_hidden_dim: 4096,
            patch_size: 2,
            latent_channels: 16,
            text_embed_dim: 4096,
            max_text_tokens: 256,
            vocab_hash_size: 32_128,
            time_freq_dim: 256,
            norm_eps: 1e-6,
            rope_theta: DEFAULT_ROPE_THETA,
            pooled_text_conditioning: false,
        }
    }

    /// Two layers, width 32; small enough for whole-model finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            model_dim: 32,
            head_schedule: vec![2, 4],
            mlp_hidden_dim: 32,
            patch_size: 2,
            latent_channels: 4,
            text_embed_dim: 8,
            max_text_tokens: 8,
            vocab_hash_size: 64,
            time_freq_dim: 8,
            norm_eps: 1e-6,
            rope_theta: DEFAULT_ROPE_THETA,
            pooled_text_conditioning: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_schedule.len() != self.layers {
            return Err(Error::Config(format!(
                "head_schedule has {} entries but layers = {}",
                self.head_schedule.len(),
                self.layers
            )));
        }
        for (i, spec) in self.block_specs().iter().enumerate() {
            spec.validate()
                .map_err(|e| Error::Config(format!("head_schedule[{i}]: {e}")))?;
        }
        let positive = [
            ("patch_size", self.patch_size),
            ("latent_channels", self.latent_channels),
            ("text_embed_dim", self.text_embed_dim),
            ("max_text_tokens", self.max_text_tokens),
            ("vocab_hash_size", self.vocab_hash_size),
            ("model_dim", self.model_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_freq_dim < 2 || !self.time_freq_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_freq_dim must be even and >= 2, got {}",
                self.time_freq_dim
            )));
        }
        if !(self.norm_eps >= 0.0) || !(self.rope_theta > 0.0) {
            return Err(Error::Config("norm_eps must be >= 0 and rope_theta > 0".into()));
        }
        Ok(())
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        self.head_schedule
            .iter()
            .map(|&h| BlockSpec {
                model_dim: self.model_dim,
                head_count: h,
                mlp_hidden_dim: self.mlp_hidden_dim,
                norm_eps: self.norm_eps,
                rope_theta: self.rope_theta,
            })
            .collect()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedules() {
        let s32 = head_schedule_default(32).unwrap();
        let expected: Vec<usize> = [8, 16, 24, 48].iter().flat_map(|&h| vec![h; 8]).collect();
        assert_eq!(s32, expected);
        assert_eq!(head_schedule_default(4).unwrap(), vec![8, 16, 24, 48]);
        assert_eq!(head_schedule_default(8).unwrap(), vec![8, 8, 16, 16, 24, 24, 48, 48]);
        assert!(matches!(head_schedule_default(6), Err(Error::Config(_))));
        assert!(head_schedule_default(0).is_err());
    }

    #[test]
    fn shipped_configs_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn schedule_length_must_match_layers() {
        let mut c = ModelConfig::desk();
        c.head_schedule.pop();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("head_schedule"), "{msg}");
    }

    #[test]
    fn every_entry_must_fit_model_dim() {
        let mut c = ModelConfig::desk();
        c.head_schedule[3] = 5;
        assert!(c.validate().is_err());
    }
}
