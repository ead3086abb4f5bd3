use serde::{Deserialize, Serialize};

use super::ToyDataset;
use crate::error::{Error, Result};
use crate::flow::{initial_noise, integrate};
use crate::model::{Dit, TextEmbedding};

/// Class-conditional sampling quality on the toy task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEval {
    pub samples: usize,
    pub steps: usize,
    pub cfg_scale: f64,
    /// Fraction of samples whose nearest centroid is their prompted class.
    pub accuracy: f64,
    /// Mean RMS distance of a sample to its prompted class centroid.
    pub mean_centroid_rms: f64,
}

/// Draws `samples` latents, cycling through the classes, in batches of
/// `batch`. Noise for batch `j` comes from `seed + j`.
pub fn evaluate_toy(
    model: &Dit<f32>,
    data: &ToyDataset,
    samples: usize,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
    batch: usize,
) -> Result<ToyEval> {
    if samples == 0 || batch == 0 {
        return Err(Error::Config("evaluation needs samples >= 1 and batch >= 1".into()));
    }
    let classes = data.config.classes;
    let prompts: Vec<TextEmbedding<f32>> =
        (0..classes).map(|k| model.encode_prompt(data.prompt(k))).collect::<Result<_>>()?;
    let empty = model.encode_prompt("")?;
    let [c, h, w] = data.latent_shape();
    let (mut correct, mut rms_sum) = (0usize, 0.0);
    let mut start = 0;
    while start < samples {
        let b = batch.min(samples - start);
        let labels: Vec<usize> = (start..start + b).map(|i| i % classes).collect();
        let conds: Vec<&TextEmbedding<f32>> = labels.iter().map(|&k| &prompts[k]).collect();
        let x0 = initial_noise::<f32>(&[b, c, h, w], seed.wrapping_add((start / batch) as u64));
        let out = integrate(model, &x0, &conds, &vec![&empty; b], steps, cfg_scale)?.to_vec();
        for (x, &k) in out.chunks(c * h * w).zip(&labels) {
            correct += usize::from(data.nearest_class(x) == k);
            rms_sum += data.centroid_rms(x, k);
        }
        start += b;
    }
    Ok(ToyEval {
        samples,
        steps,
        cfg_scale,
        accuracy: correct as f64 / samples as f64,
        mean_centroid_rms: rms_sum / samples as f64,
    })
}
