use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::tensor::{Element, Tensor};

/// Sinusoidal features of `t ∈ [0, 1]` followed by a three-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder<T: Element> {
    pub freq_dim: usize,
    pub layers: [Linear<T>; 3],
}

impl<T: Element> TimestepEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(freq_dim: usize, dim: usize, rng: &mut R) -> Self {
        TimestepEmbedder {
            freq_dim,
            layers: [
                Linear::new(freq_dim, dim, true, rng),
                Linear::new(dim, dim, true, rng),
                Linear::new(dim, dim, true, rng),
            ],
        }
    }

    /// `[cos(1000·t·f_i), sin(1000·t·f_i)]` with geometric `f_i`.
    pub fn features(&self, ts: &[f64]) -> Result<Tensor<T>> {
        let half = self.freq_dim / 2;
        let mut out = Vec::with_capacity(ts.len() * self.freq_dim);
        for &t in ts {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
            }
            let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| 1000.0 * t * f).collect();
            out.extend(args.iter().map(|a| T::from_f64(a.cos())));
            out.extend(args.iter().map(|a| T::from_f64(a.sin())));
        }
        Tensor::from_vec(&[ts.len(), self.freq_dim], out)
    }

    /// `[B] -> [B, dim]`.
    pub fn forward(&self, ts: &[f64]) -> Result<Tensor<T>> {
        let h = self.layers[0].forward(&self.features(ts)?)?.silu();
        let h = self.layers[1].forward(&h)?.silu();
        self.layers[2].forward(&h)
    }
}

impl<T: Element> Module<T> for TimestepEmbedder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&join(prefix, &format!("mlp{i}")), out);
        }
    }
}

/// Token embeddings of one prompt, BOS first.
#[derive(Debug, Clone)]
pub struct TextEmbedding<T: Element> {
    /// `[n_tokens, embed_dim]`.
    pub tokens: Tensor<T>,
    /// Hash bucket of each token; `None` for BOS.
    pub token_ids: Vec<Option<usize>>,
}

impl<T: Element> TextEmbedding<T> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Source of prompt embeddings. Frozen from the generator's point of view.
pub trait TextEncoder<T: Element> {
    fn embed_dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<TextEmbedding<T>>;
}

/// 64-bit FNV-1a.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace tokens hashed into a fixed random table, with a BOS row.
#[derive(Debug, Clone)]
pub struct ToyTextEmbedder<T: Element> {
    /// `[vocab_hash_size, embed_dim]`.
    pub table: Tensor<T>,
    /// `[1, embed_dim]`.
    pub bos: Tensor<T>,
    pub max_tokens: usize,
}

impl<T: Element> ToyTextEmbedder<T> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, max_tokens: usize, rng: &mut R) -> Self {
        ToyTextEmbedder {
            table: Tensor::randn(&[vocab, dim], 1.0, rng),
            bos: Tensor::randn(&[1, dim], 1.0, rng),
            max_tokens,
        }
    }

    pub fn bucket(&self, word: &str) -> usize {
        (stable_hash(word.as_bytes()) % self.table.shape()[0] as u64) as usize
    }
}

impl<T: Element> TextEncoder<T> for ToyTextEmbedder<T> {
    fn embed_dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn encode(&self, prompt: &str) -> Result<TextEmbedding<T>> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .take(self.max_tokens.saturating_sub(1))
            .map(|w| self.bucket(w))
            .collect();
        let mut token_ids = vec![None];
        token_ids.extend(ids.iter().copied().map(Some));
        let tokens = if ids.is_empty() {
            self.bos.clone()
        } else {
            Tensor::concat(&[self.bos.clone(), self.table.gather_rows(&ids)?], 0)?
        };
        Ok(TextEmbedding { tokens, token_ids })
    }
}

impl<T: Element> Module<T> for ToyTextEmbedder<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "table"), self.table.clone()));
        out.push((join(prefix, "bos"), self.bos.clone()));
    }
}
