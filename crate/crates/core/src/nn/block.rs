use rand::Rng;

use super::{join, BlockSpec, JointAttention, Linear, Module, PackedLayout, SwiGlu};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Two-layer projection of the conditioning vector into per-channel
/// `(scale, shift, gate)`. The gate columns start at zero.
#[derive(Debug, Clone)]
pub struct Modulation<T: Element> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
    pub dim: usize,
}

impl<T: Element> Modulation<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let hidden = Linear::new(dim, dim, true, rng);
        let out = Linear::new(dim, 3 * dim, true, rng);
        {
            let mut w = out.weight.data_mut();
            for row in w.chunks_mut(3 * dim) {
                row[2 * dim..].fill(T::zero());
            }
        }
        Modulation { hidden, out, dim }
    }

    /// `[segments, dim] -> [segments, 3·dim]`.
    pub fn forward(&self, cond: &Tensor<T>) -> Result<Tensor<T>> {
        self.out.forward(&self.hidden.forward(cond)?.silu())
    }

    /// Splits the per-segment modulation into per-token `(scale, shift, gate)`.
    pub fn per_token(
        &self,
        cond: &Tensor<T>,
        layout: &PackedLayout,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let m = self.forward(cond)?.gather_rows(&layout.token_segment)?;
        let d = self.dim;
        Ok((m.narrow(1, 0, d)?, m.narrow(1, d, d)?, m.narrow(1, 2 * d, d)?))
    }
}

impl<T: Element> Module<T> for Modulation<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.hidden.collect_params(&join(prefix, "hidden"), out);
        self.out.collect_params(&join(prefix, "out"), out);
    }
}

#[derive(Debug, Clone)]
pub enum Sublayer<T: Element> {
    Attention(JointAttention<T>),
    Mlp(SwiGlu<T>),
}

/// `y = x + gate ⊙ rms(sublayer(rms(x) ⊙ (1 + scale) + shift))`.
#[derive(Debug, Clone)]
pub struct SandwichBlock<T: Element> {
    pub modulation: Modulation<T>,
    pub sublayer: Sublayer<T>,
    pub eps: f64,
}

impl<T: Element> SandwichBlock<T> {
    pub fn attention<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<Self> {
        let attn = JointAttention::new(spec, rng)?;
        Ok(SandwichBlock {
            modulation: Modulation::new(spec.model_dim, rng),
            sublayer: Sublayer::Attention(attn),
            eps: spec.norm_eps,
        })
    }

    pub fn mlp<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mlp = SwiGlu::new(spec, rng);
        Ok(SandwichBlock {
            modulation: Modulation::new(spec.model_dim, rng),
            sublayer: Sublayer::Mlp(mlp),
            eps: spec.norm_eps,
        })
    }

    /// Sublayer output after the post-norm, before gating.
    pub fn normalized_sublayer(
        &self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
        layout: &PackedLayout,
    ) -> Result<Tensor<T>> {
        let h = x.rms_normalize(self.eps)?.mul(&scale.add_scalar(1.0))?.add(shift)?;
        let s = match &self.sublayer {
            Sublayer::Attention(a) => a.forward(&h, layout)?,
            Sublayer::Mlp(m) => m.forward(&h)?,
        };
        s.rms_normalize(self.eps)
    }

    /// `x: [tokens, dim]`, `cond: [segments, dim]`.
    pub fn forward(&self, x: &Tensor<T>, cond: &Tensor<T>, layout: &PackedLayout) -> Result<Tensor<T>> {
        if cond.shape() != [layout.segments.len(), self.modulation.dim] {
            return Err(shape_err!(
                "conditioning {:?} does not match {} sequences of dim {}",
                cond.shape(),
                layout.segments.len(),
                self.modulation.dim
            ));
        }
        let (scale, shift, gate) = self.modulation.per_token(cond, layout)?;
        let s = self.normalized_sublayer(x, &scale, &shift, layout)?;
        x.add(&gate.mul(&s)?)
    }
}

impl<T: Element> Module<T> for SandwichBlock<T> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.modulation.collect_params(&join(prefix, "modulation"), out);
        match &self.sublayer {
            Sublayer::Attention(a) => a.collect_params(&join(prefix, "attn"), out),
            Sublayer::Mlp(m) => m.collect_params(&join(prefix, "mlp"), out),
        }
    }
}
