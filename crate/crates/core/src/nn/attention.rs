use rand::Rng;

use super::{join, rope2d_rotate, BlockSpec, Linear, Module, PackedLayout};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{grad_enabled, Element, Tensor};

/// Bidirectional self-attention over a joint text+image sequence.
///
/// Queries and keys are RMS-normalized per head (no learned gain) and
/// then rotated with 2D RoPE before scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct JointAttention<T: Element> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub spec: BlockSpec,
}

impl<T: Element> JointAttention<T> {
    pub fn new<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        Ok(JointAttention {
            q: Linear::new(d, d, false, rng),
            k: Linear::new(d, d, false, rng),
            v: Linear::new(d, d, false, rng),
            out: Linear::new(d, d, false, rng),
            spec: spec.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, layout: &PackedLayout) -> Result<Tensor<T>> {
        Ok(self.run(x, layout, false)?.0)
    }

    /// Softmax weights `[heads, n, n]` for every packed sequence.
    pub fn attention_weights(&self, x: &Tensor<T>, layout: &PackedLayout) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(x, layout, true)?.1)
    }

    fn run(
        &self,
        x: &Tensor<T>,
        layout: &PackedLayout,
        keep_weights: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (heads, hd, d) = (self.spec.head_count, self.spec.head_dim(), self.spec.model_dim);
        let n = layout.tokens();
        if n == 0 {
            return Err(Error::Contract("attention over zero tokens".into()));
        }
        if x.shape() != [n, d] {
            return Err(shape_err!(
                "attention input {:?} does not match layout [{n}, {d}]",
                x.shape()
            ));
        }
        let eps = self.spec.norm_eps;
        let mut q = self.q.forward(x)?.reshape(&[n, heads, hd])?.rms_normalize(eps)?;
        let mut k = self.k.forward(x)?.reshape(&[n, heads, hd])?.rms_normalize(eps)?;
        if let Some(pos) = &layout.positions {
            q = rope2d_rotate(&q, pos, self.spec.rope_theta)?;
            k = rope2d_rotate(&k, pos, self.spec.rope_theta)?;
        }
        let v = self.v.forward(x)?.reshape(&[n, heads, hd])?;
        let scale = 1.0 / (hd as f64).sqrt();

        let tracked = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
        let single = layout.segments.len() == 1;
        let mut outs = Vec::with_capacity(layout.segments.len());
        let mut weights = Vec::new();
        for seg in &layout.segments {
            let len = seg.len();
            let slice = |t: &Tensor<T>| -> Result<Tensor<T>> {
                if single {
                    Ok(t.clone())
                } else {
                    t.narrow(0, seg.start, len)
                }
            };
            if !keep_weights && !tracked {
                outs.push(slice(&q)?.attention_inference(&slice(&k)?, &slice(&v)?, scale)?);
                continue;
            }
            let qs = slice(&q)?.permute(&[1, 0, 2])?;
            let ks = slice(&k)?.permute(&[1, 2, 0])?;
            let vs = slice(&v)?.permute(&[1, 0, 2])?;
            let w = qs.matmul(&ks)?.scale(scale).softmax_lastdim()?;
            let o = w.matmul(&vs)?.permute(&[1, 0, 2])?.reshape(&[len, d])?;
            if keep_weights {
                weights.push(w);
            }
            outs.push(o);
        }
        let merged = if single {
            outs.pop().expect("one segment")
        } else {
            Tensor::concat(&outs, 0)?
        };
        Ok((self.out.forward(&merged)?, weights))
    }
}

impl<T: Element> Module<T> for JointAttention<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.q.collect_params(&join(prefix, "q"), out);
        self.k.collect_params(&join(prefix, "k"), out);
        self.v.collect_params(&join(prefix, "v"), out);
        self.out.collect_params(&join(prefix, "out"), out);
    }
}
