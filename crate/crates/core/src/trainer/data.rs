use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::datapipe::{CacheManifest, Stage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source of `(latents [B,C,H,W], prompts)` training batches.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether the data was prepared for this resolution stage.
    fn supports(&self, stage: Stage) -> bool;

    fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<String>)>;
}

pub const TOY_PROMPTS: [&str; 8] = [
    "red circle",
    "blue square",
    "green triangle",
    "yellow star",
    "purple cross",
    "orange ring",
    "white stripe",
    "black dot",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataConfig {
    #[serde(default = "classes")]
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-element standard deviation around the class centroid.
    #[serde(default = "spread")]
    pub spread: f64,
    /// Seed of the centroids; independent of the training seed.
    #[serde(default)]
    pub seed: u64,
}

fn classes() -> usize {
    8
}
fn spread() -> f64 {
    0.1
}

/// Class-conditional Gaussian blobs: class `k` has prompt `TOY_PROMPTS[k]`
/// and latents `centroid_k + spread · N(0, I)`.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub config: ToyDataConfig,
    pub centroids: Vec<Vec<f32>>,
}

impl ToyDataset {
    pub fn new(config: ToyDataConfig) -> Result<Self> {
        if config.classes == 0 || config.classes > TOY_PROMPTS.len() {
            return Err(Error::Config(format!(
                "toy dataset supports 1..={} classes, got {}",
                TOY_PROMPTS.len(),
                config.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.channels * config.height * config.width;
        let centroids = (0..config.classes)
            .map(|_| (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        Ok(ToyDataset { config, centroids })
    }

    pub fn prompt(&self, class: usize) -> &'static str {
        TOY_PROMPTS[class]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.height, self.config.width]
    }

    /// Index of the centroid closest (L2) to `x`.
    pub fn nearest_class(&self, x: &[f32]) -> usize {
        let dist = |c: &[f32]| x.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        (0..self.centroids.len())
            .min_by(|&a, &b| dist(&self.centroids[a]).total_cmp(&dist(&self.centroids[b])))
            .expect("at least one class")
    }

    /// Root-mean-square distance of `x` to the centroid of `class`.
    pub fn centroid_rms(&self, x: &[f32], class: usize) -> f64 {
        let c = &self.centroids[class];
        (x.iter().zip(c).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / c.len() as f64).sqrt()
    }
}

impl Dataset for ToyDataset {
    fn len(&self) -> usize {
        self.config.classes
    }

    fn supports(&self, _: Stage) -> bool {
        true
    }

    fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<String>)> {
        let n = self.centroids[0].len();
        let mut data = Vec::with_capacity(size * n);
        let mut prompts = Vec::with_capacity(size);
        let s = self.config.spread as f32;
        for _ in 0..size {
            let k = rng.random_range(0..self.config.classes);
            data.extend(self.centroids[k].iter().map(|&c| c + s * rng.sample::<f32, _>(StandardNormal)));
            prompts.push(self.prompt(k).to_string());
        }
        let [c, h, w] = self.latent_shape();
        Ok((Tensor::from_vec(&[size, c, h, w], data)?, prompts))
    }
}

/// Latents read back from a cache built by the preprocessing step. Batches
/// are drawn from one shape group at a time.
#[derive(Debug, Clone)]
pub struct CachedLatents {
    pub stage: Stage,
    groups: Vec<(Vec<usize>, Vec<(Vec<f32>, String)>)>,
    total: usize,
}

impl CachedLatents {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = CacheManifest::load(dir)?;
        let container = Container::load(CacheManifest::container_path(dir))?;
        let mut by_shape: BTreeMap<Vec<usize>, Vec<(Vec<f32>, String)>> = BTreeMap::new();
        for e in &manifest.entries {
            let t = container.get::<f32>(&e.id)?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Integrity {
                    tensor: e.id.clone(),
                    reason: format!("manifest shape {:?}, stored {:?}", e.shape, t.shape()),
                });
            }
            by_shape.entry(e.shape.clone()).or_default().push((t.to_vec(), e.prompt.clone()));
        }
        Ok(CachedLatents {
            stage: manifest.options.stage,
            total: manifest.entries.len(),
            groups: by_shape.into_iter().collect(),
        })
    }
}

impl Dataset for CachedLatents {
    fn len(&self) -> usize {
        self.total
    }

    fn supports(&self, stage: Stage) -> bool {
        self.stage == stage
    }

    fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<String>)> {
        if self.total == 0 {
            return Err(Error::Config("latent cache is empty".into()));
        }
        let mut pick = rng.random_range(0..self.total);
        let (shape, items) = self
            .groups
            .iter()
            .find(|(_, items)| {
                if pick < items.len() {
                    true
                } else {
                    pick -= items.len();
                    false
                }
            })
            .expect("index within total");
        let mut data = Vec::with_capacity(size * items[0].0.len());
        let mut prompts = Vec::with_capacity(size);
        for _ in 0..size {
            let (latent, prompt) = &items[rng.random_range(0..items.len())];
            data.extend_from_slice(latent);
            prompts.push(prompt.clone());
        }
        let mut full = vec![size];
        full.extend_from_slice(shape);
        Ok((Tensor::from_vec(&full, data)?, prompts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TextEncoder, ToyTextEmbedder};

    fn toy() -> ToyDataset {
        ToyDataset::new(ToyDataConfig { classes: 8, channels: 4, height: 4, width: 4, spread: 0.1, seed: 0 }).unwrap()
    }

    #[test]
    fn batches_are_seed_determined() {
        let d = toy();
        let a = d.batch(5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = d.batch(5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.0.to_vec(), b.0.to_vec());
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.shape(), &[5, 4, 4, 4]);
    }

    #[test]
    fn samples_sit_near_their_centroid() {
        let d = toy();
        let (x, prompts) = d.batch(32, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let class = TOY_PROMPTS.iter().position(|q| q == p).unwrap();
            let row = &x.to_vec()[i * 64..(i + 1) * 64];
            assert_eq!(d.nearest_class(row), class);
            assert!(d.centroid_rms(row, class) < 0.2);
        }
    }

    #[test]
    fn toy_prompts_encode_distinctly_under_desk_vocab() {
        let cfg = ModelConfig::desk();
        let e = ToyTextEmbedder::<f32>::new(cfg.vocab_hash_size, 4, cfg.max_text_tokens, &mut ChaCha8Rng::seed_from_u64(0));
        let ids: std::collections::BTreeSet<Vec<Option<usize>>> =
            TOY_PROMPTS.iter().map(|p| e.encode(p).unwrap().token_ids).collect();
        assert_eq!(ids.len(), TOY_PROMPTS.len());
    }
}
