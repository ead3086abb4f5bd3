//! The flow-matching diffusion transformer.
//!
//! Text tokens (BOS first) and latent patch tokens are projected to the
//! model width and concatenated into one sequence per sample. Every layer
//! is a sandwich-normalized attention sublayer followed by a sandwich-
//! normalized SwiGLU sublayer, with its own attention head count taken from
//! `ModelConfig::head_schedule`. Only image tokens reach the output head,
//! which predicts a velocity field shaped like the input latent.

mod adapter;
mod config;
mod embed;
mod patch;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adapter::{to_byte, to_unit_range, IdentityAdapter, LatentAdapter};
pub use config::{head_schedule_default, ModelConfig, HEAD_GROUPS};
pub use embed::{stable_hash, TextEmbedding, TextEncoder, TimestepEmbedder, ToyTextEmbedder};
pub use patch::{patchify, unpatchify, LatentGeometry};

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Linear, Module, PackedLayout, PositionId, SandwichBlock};
use crate::tensor::{Element, Tensor};

/// Anything that predicts a velocity for a batch of latents.
pub trait VelocityModel<T: Element> {
    /// `x: [B,C,H,W]`, one timestep and one prompt embedding per sample.
    fn velocity(&self, x: &Tensor<T>, t: &[f64], texts: &[&TextEmbedding<T>]) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone)]
pub struct DitBlock<T: Element> {
    pub attn: SandwichBlock<T>,
    pub mlp: SandwichBlock<T>,
}

impl<T: Element> DitBlock<T> {
    pub fn head_count(&self) -> usize {
        match &self.attn.sublayer {
            crate::nn::Sublayer::Attention(a) => a.spec.head_count,
            crate::nn::Sublayer::Mlp(_) => 0,
        }
    }
}

/// Conditioned RMS norm followed by the patch-space output projection.
#[derive(Debug, Clone)]
pub struct FinalLayer<T: Element> {
    pub modulation: Linear<T>,
    pub head: Linear<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Dit<T: Element> {
    pub config: ModelConfig,
    /// Frozen; stands in for a pre-trained text encoder.
    pub text_embedder: ToyTextEmbedder<T>,
    pub time_embed: TimestepEmbedder<T>,
    pub text_proj: Linear<T>,
    pub image_proj: Linear<T>,
    pub pooled_proj: Option<Linear<T>>,
    pub blocks: Vec<DitBlock<T>>,
    pub final_layer: FinalLayer<T>,
}

pub const FROZEN_PREFIX: &str = "text_embedder";

impl<T: Element> Dit<T> {
    /// Standard initialization: random projections, zero residual gates,
    /// zero output head.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let text_embedder = ToyTextEmbedder::new(
            config.vocab_hash_size,
            config.text_embed_dim,
            config.max_text_tokens,
            &mut rng,
        );
        let time_embed = TimestepEmbedder::new(config.time_freq_dim, d, &mut rng);
        let text_proj = Linear::new(config.text_embed_dim, d, true, &mut rng);
        let image_proj = Linear::new(config.patch_dim(), d, true, &mut rng);
        let pooled_proj = config
            .pooled_text_conditioning
            .then(|| Linear::new(config.text_embed_dim, d, true, &mut rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for spec in config.block_specs() {
            blocks.push(DitBlock {
                attn: SandwichBlock::attention(&spec, &mut rng)?,
                mlp: SandwichBlock::mlp(&spec, &mut rng)?,
            });
        }
        let final_layer = FinalLayer {
            modulation: Linear::new(d, 2 * d, true, &mut rng),
            head: Linear::zeros(d, config.patch_dim(), true),
            eps: config.norm_eps,
        };
        Ok(Dit {
            config: config.clone(),
            text_embedder,
            time_embed,
            text_proj,
            image_proj,
            pooled_proj,
            blocks,
            final_layer,
        })
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<TextEmbedding<T>> {
        self.text_embedder.encode(prompt)
    }

    /// Every tensor including the frozen text table, sorted by name.
    pub fn all_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        self.named_parameters().into_iter().collect()
    }

    /// Tensors updated by training (everything except the text embedder).
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn frozen_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| !t.requires_grad())
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.trainable_parameters() {
            p.zero_grad();
        }
    }

    /// Overwrites every trainable tensor with N(0, std²) draws, including
    /// the zero-initialized gates and head. Used by gradient checks.
    pub fn randomize(&self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in self.trainable_parameters() {
            let fresh = Tensor::<T>::randn(p.shape(), std, &mut rng);
            p.set_data(&fresh.data()).expect("same shape");
        }
    }

    /// Stores all tensors under `prefix` and the config under `__config__`.
    pub fn write_to(&self, container: &mut Container, prefix: &str) -> Result<()> {
        container.config = Some(serde_json::to_value(&self.config)?);
        for (name, t) in self.all_tensors() {
            container.insert(join(prefix, &name), &t);
        }
        Ok(())
    }

    /// Rebuilds a model from a container written by [`Dit::write_to`].
    /// When `expected` is given the stored config must equal it.
    pub fn read_from(container: &Container, prefix: &str, expected: Option<&ModelConfig>) -> Result<Self> {
        let stored: ModelConfig = match &container.config {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("checkpoint config unreadable: {e}")))?,
            None => return Err(Error::Config("checkpoint carries no model config".into())),
        };
        if let Some(exp) = expected {
            if exp != &stored {
                return Err(Error::Config(describe_mismatch(exp, &stored)));
            }
        }
        let model = Dit::new(&stored, 0)?;
        for (name, t) in model.all_tensors() {
            let loaded = container.get::<T>(&join(prefix, &name))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Integrity {
                    tensor: name,
                    reason: format!("shape {:?}, model expects {:?}", loaded.shape(), t.shape()),
                });
            }
            t.set_data(&loaded.data())?;
        }
        Ok(model)
    }

    /// `x: [B,C,H,W]` (or `[C,H,W]`) → velocity of the same shape.
    pub fn forward(&self, x: &Tensor<T>, t: &[f64], texts: &[&TextEmbedding<T>]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let geo = LatentGeometry::of(x.shape(), cfg.patch_size)?;
        if geo.channels != cfg.latent_channels {
            return Err(shape_err!(
                "latent has {} channels, model expects {}",
                geo.channels,
                cfg.latent_channels
            ));
        }
        let b = geo.batch;
        if t.len() != b || texts.len() != b {
            return Err(Error::Contract(format!(
                "batch of {b} latents with {} timesteps and {} prompts",
                t.len(),
                texts.len()
            )));
        }
        for te in texts {
            if te.is_empty() || te.len() > cfg.max_text_tokens {
                return Err(shape_err!(
                    "prompt has {} tokens; expected 1..={}",
                    te.len(),
                    cfg.max_text_tokens
                ));
            }
        }
        let x4 = if x.ndim() == 3 { x.reshape(&geo.latent_shape())? } else { x.clone() };

        // image tokens, all samples stacked
        let (patches, grid) = patchify(&x4, cfg.patch_size)?;
        let n_img = grid.len();
        let img = self.image_proj.forward(&patches)?;

        // text tokens, all samples stacked
        let text_all = if texts.len() == 1 {
            texts[0].tokens.clone()
        } else {
            Tensor::concat(&texts.iter().map(|t| t.tokens.clone()).collect::<Vec<_>>(), 0)?
        };
        let txt = self.text_proj.forward(&text_all)?;
        let n_text_total = text_all.shape()[0];

        // interleave into [text_b, image_b] per sample
        let mut order = Vec::with_capacity(n_text_total + b * n_img);
        let mut positions = Vec::with_capacity(order.capacity());
        let mut seg_lens = Vec::with_capacity(b);
        let mut image_rows = Vec::with_capacity(b * n_img);
        let mut text_off = 0;
        for (s, te) in texts.iter().enumerate() {
            let n = te.len();
            order.extend(text_off..text_off + n);
            positions.extend((0..n).map(PositionId::text));
            text_off += n;
            let seq_start = order.len();
            order.extend((0..n_img).map(|i| n_text_total + s * n_img + i));
            positions.extend(grid.iter().copied());
            image_rows.extend(seq_start..seq_start + n_img);
            seg_lens.push(n + n_img);
        }
        let layout = PackedLayout::new(&seg_lens, Some(positions))?;
        let mut h = Tensor::concat(&[txt, img], 0)?.gather_rows(&order)?;

        let mut cond = self.time_embed.forward(t)?;
        if let Some(pp) = &self.pooled_proj {
            let mut avg = vec![T::zero(); b * n_text_total];
            let mut off = 0;
            for (s, te) in texts.iter().enumerate() {
                let w = T::from_f64(1.0 / te.len() as f64);
                for j in off..off + te.len() {
                    avg[s * n_text_total + j] = w;
                }
                off += te.len();
            }
            let pooled = Tensor::from_vec(&[b, n_text_total], avg)?.matmul(&text_all)?;
            cond = cond.add(&pp.forward(&pooled)?)?;
        }

        for block in &self.blocks {
            h = block.attn.forward(&h, &cond, &layout)?;
            h = block.mlp.forward(&h, &cond, &layout)?;
        }

        let img_h = h.gather_rows(&image_rows)?;
        let d = cfg.model_dim;
        let image_segment: Vec<usize> = (0..b).flat_map(|s| std::iter::repeat_n(s, n_img)).collect();
        let m = self
            .final_layer
            .modulation
            .forward(&cond.silu())?
            .gather_rows(&image_segment)?;
        let (scale, shift) = (m.narrow(1, 0, d)?, m.narrow(1, d, d)?);
        let normed = img_h
            .rms_normalize(self.final_layer.eps)?
            .mul(&scale.add_scalar(1.0))?
            .add(&shift)?;
        let out = self.final_layer.head.forward(&normed)?;
        let v = unpatchify(&out, &geo)?;
        if x.ndim() == 3 {
            v.reshape(x.shape())
        } else {
            Ok(v)
        }
    }
}

fn describe_mismatch(expected: &ModelConfig, stored: &ModelConfig) -> String {
    let (e, s) = (
        serde_json::to_value(expected).unwrap_or_default(),
        serde_json::to_value(stored).unwrap_or_default(),
    );
    let mut fields = Vec::new();
    if let (Some(e), Some(s)) = (e.as_object(), s.as_object()) {
        for (k, ev) in e {
            if s.get(k) != Some(ev) {
                fields.push(format!("{k}: requested {ev}, checkpoint {}", s.get(k).cloned().unwrap_or_default()));
            }
        }
    }
    format!("checkpoint config does not match requested model ({})", fields.join("; "))
}

impl<T: Element> Module<T> for Dit<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.text_embedder.collect_params(&join(prefix, FROZEN_PREFIX), out);
        self.time_embed.collect_params(&join(prefix, "time_embed"), out);
        self.text_proj.collect_params(&join(prefix, "text_proj"), out);
        self.image_proj.collect_params(&join(prefix, "image_proj"), out);
        if let Some(pp) = &self.pooled_proj {
            pp.collect_params(&join(prefix, "pooled_proj"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.attn.collect_params(&join(prefix, &format!("blocks.{i}.attn")), out);
            b.mlp.collect_params(&join(prefix, &format!("blocks.{i}.mlp")), out);
        }
        self.final_layer
            .modulation
            .collect_params(&join(prefix, "final.modulation"), out);
        self.final_layer.head.collect_params(&join(prefix, "final.head"), out);
    }
}

impl<T: Element> VelocityModel<T> for Dit<T> {
    fn velocity(&self, x: &Tensor<T>, t: &[f64], texts: &[&TextEmbedding<T>]) -> Result<Tensor<T>> {
        self.forward(x, t, texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn latent<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn desk_output_shape_and_zero_init() {
        let model = Dit::<f32>::new(&ModelConfig::desk(), 0).unwrap();
        let x = latent::<f32>(&[2, 16, 8, 8], 1);
        let a = model.encode_prompt("a red circle").unwrap();
        let b = model.encode_prompt("").unwrap();
        let v = model.forward(&x, &[0.2, 0.9], &[&a, &b]).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.to_vec().iter().all(|&u| u == 0.0));

        let single = model.forward(&latent::<f32>(&[16, 8, 8], 2), &[0.5], &[&a]).unwrap();
        assert_eq!(single.shape(), &[16, 8, 8]);
    }

    #[test]
    fn whole_model_gradient_check() {
        let model = Dit::<f64>::new(&ModelConfig::tiny(), 3).unwrap();
        model.randomize(4, 0.3);
        let x = latent::<f64>(&[2, 4, 4, 4], 5);
        let ta = model.encode_prompt("blue square").unwrap();
        let tb = model.encode_prompt("green").unwrap();
        let w = latent::<f64>(&[2, 4, 4, 4], 6);
        let params: Vec<_> = model.trainable_parameters().into_iter().map(|(_, t)| t).collect();
        let report = check_gradients(&params, 1e-5, || {
            model.forward(&x, &[0.3, 0.7], &[&ta, &tb]).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.checked > 1000);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn census_splits_frozen_text_table() {
        let model = Dit::<f32>::new(&ModelConfig::tiny(), 0).unwrap();
        let frozen: Vec<String> = model.frozen_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(frozen, vec!["text_embedder.table", "text_embedder.bos"]);
        let trainable: Vec<String> = model.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        for needle in ["time_embed.", "text_proj.", "image_proj.", "blocks.1.mlp.", "final.head."] {
            assert!(trainable.iter().any(|n| n.starts_with(needle)), "{needle}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Dit::<f32>::new(&ModelConfig::tiny(), 7).unwrap();
        model.randomize(8, 0.2);
        let x = latent::<f32>(&[1, 4, 4, 4], 9);
        let t = model.encode_prompt("x y").unwrap();
        let a = model.forward(&x, &[0.4], &[&t]).unwrap().to_vec();
        let b = model.forward(&x, &[0.4], &[&t]).unwrap().to_vec();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn batched_forward_matches_per_sample() {
        let model = Dit::<f64>::new(&ModelConfig::tiny(), 10).unwrap();
        model.randomize(11, 0.3);
        let x = latent::<f64>(&[2, 4, 4, 4], 12);
        let (ta, tb) = (model.encode_prompt("one").unwrap(), model.encode_prompt("two three four").unwrap());
        let both = model.forward(&x, &[0.1, 0.6], &[&ta, &tb]).unwrap().to_vec();
        let x0 = x.narrow(0, 0, 1).unwrap();
        let x1 = x.narrow(0, 1, 1).unwrap();
        let mut sep = model.forward(&x0, &[0.1], &[&ta]).unwrap().to_vec();
        sep.extend(model.forward(&x1, &[0.6], &[&tb]).unwrap().to_vec());
        for (a, b) in both.iter().zip(&sep) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_schedule_changes_output_not_shape() {
        let mut cfg = ModelConfig::tiny();
        let x = latent::<f64>(&[1, 4, 4, 4], 13);
        let run = |cfg: &ModelConfig| {
            let m = Dit::<f64>::new(cfg, 14).unwrap();
            m.randomize(15, 0.3);
            let t = m.encode_prompt("z").unwrap();
            m.forward(&x, &[0.5], &[&t]).unwrap()
        };
        let a = run(&cfg);
        cfg.head_schedule = vec![4, 2];
        let b = run(&cfg);
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn pooled_text_conditioning_is_wired() {
        let mut cfg = ModelConfig::tiny();
        cfg.pooled_text_conditioning = true;
        let model = Dit::<f64>::new(&cfg, 16).unwrap();
        model.randomize(17, 0.3);
        let x = latent::<f64>(&[2, 4, 4, 4], 18);
        let (ta, tb) = (model.encode_prompt("a b").unwrap(), model.encode_prompt("c").unwrap());
        let w = latent::<f64>(&[2, 4, 4, 4], 19);
        let params: Vec<_> = model
            .trainable_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("pooled_proj"))
            .map(|(_, t)| t)
            .collect();
        assert_eq!(params.len(), 2);
        let report = check_gradients(&params, 1e-5, || {
            model.forward(&x, &[0.3, 0.7], &[&ta, &tb]).unwrap().mul(&w).unwrap().sum_all()
        });
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Dit::<f32>::new(&ModelConfig::tiny(), 0).unwrap();
        let t = model.encode_prompt("a").unwrap();
        assert!(model.forward(&latent(&[1, 3, 4, 4], 0), &[0.5], &[&t]).is_err());
        assert!(model.forward(&latent(&[1, 4, 5, 4], 0), &[0.5], &[&t]).is_err());
        assert!(model.forward(&latent(&[2, 4, 4, 4], 0), &[0.5], &[&t]).is_err());
        assert!(matches!(
            model.forward(&latent(&[1, 4, 4, 4], 0), &[1.5], &[&t]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Dit::<f32>::new(&ModelConfig::tiny(), 20).unwrap();
        model.randomize(21, 0.1);
        let mut c = Container::new();
        model.write_to(&mut c, "model").unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Dit::<f32>::read_from(&Container::from_bytes(&bytes).unwrap(), "model", None).unwrap();
        for ((na, ta), (nb, tb)) in model.all_tensors().into_iter().zip(back.all_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        let mut other = ModelConfig::tiny();
        other.model_dim = 64;
        let err = Dit::<f32>::read_from(&c, "model", Some(&other)).unwrap_err();
        assert!(err.to_string().contains("model_dim"), "{err}");
    }

    fn valid_config() -> impl Strategy<Value = (ModelConfig, usize, usize, usize)> {
        (1usize..3, 1usize..3, 1usize..3, 1usize..3, 1usize..3, 1usize..3).prop_map(
            |(layers, heads, patch, gh, gw, ch)| {
                let mut cfg = ModelConfig::tiny();
                cfg.layers = layers;
                cfg.head_schedule = vec![heads * 2; layers];
                cfg.model_dim = 16 * heads;
                cfg.patch_size = patch;
                cfg.latent_channels = ch;
                (cfg, gh * patch, gw * patch, ch)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_shape_equals_input_shape((cfg, h, w, c) in valid_config(), batch in 1usize..3) {
            let model = Dit::<f32>::new(&cfg, 0).unwrap();
            model.randomize(1, 0.2);
            let x = latent::<f32>(&[batch, c, h, w], 2);
            let t = model.encode_prompt("p q").unwrap();
            let texts = vec![&t; batch];
            let v = model.forward(&x, &vec![0.5; batch], &texts).unwrap();
            prop_assert_eq!(v.shape(), x.shape());
            prop_assert!(v.to_vec().iter().all(|u| u.is_finite()));
        }
    }
}
