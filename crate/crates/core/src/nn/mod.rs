//! Transformer building blocks: linear layers, 2D rotary embeddings,
//! QK-normalized joint self-attention, SwiGLU and the conditioned
//! sandwich-normalized residual block.

mod attention;
mod block;
mod linear;
mod mlp;
mod rope;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use attention::JointAttention;
pub use block::{Modulation, SandwichBlock, Sublayer};
pub use linear::Linear;
pub use mlp::SwiGlu;
pub use rope::{rope2d_rotate, PositionId};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

/// Anything owning named trainable tensors.
pub trait Module<T: Element> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>);

    fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Per-block attention/MLP geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub model_dim: usize,
    pub head_count: usize,
    pub mlp_hidden_dim: usize,
    pub norm_eps: f64,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
}

fn default_theta() -> f64 {
    DEFAULT_ROPE_THETA
}

impl BlockSpec {
    pub fn new(model_dim: usize, head_count: usize, mlp_hidden_dim: usize) -> Self {
        BlockSpec {
            model_dim,
            head_count,
            mlp_hidden_dim,
            norm_eps: 1e-6,
            rope_theta: DEFAULT_ROPE_THETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || !self.model_dim.is_multiple_of(self.head_count) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "head_dim {} (model_dim {} / {} heads) must be divisible by 4 for 2D RoPE",
                self.head_dim(),
                self.model_dim,
                self.head_count
            )));
        }
        if self.mlp_hidden_dim == 0 {
            return Err(Error::Config("mlp_hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }
}

/// Token layout of a packed batch: several independent sequences stacked
/// row-wise into one `[tokens, dim]` matrix.
#[derive(Debug, Clone)]
pub struct PackedLayout {
    pub segments: Vec<Range<usize>>,
    /// `None` disables rotary embedding.
    pub positions: Option<Vec<PositionId>>,
    /// Sequence index of every token.
    pub token_segment: Vec<usize>,
}

impl PackedLayout {
    pub fn new(segment_lens: &[usize], positions: Option<Vec<PositionId>>) -> Result<Self> {
        let mut segments = Vec::with_capacity(segment_lens.len());
        let mut token_segment = Vec::new();
        let mut start = 0;
        for (i, &len) in segment_lens.iter().enumerate() {
            if len == 0 {
                return Err(Error::Contract(format!("sequence {i} has no tokens")));
            }
            segments.push(start..start + len);
            token_segment.extend(std::iter::repeat_n(i, len));
            start += len;
        }
        if let Some(p) = &positions {
            if p.len() != start {
                return Err(Error::Contract(format!(
                    "{} positions for {} tokens",
                    p.len(),
                    start
                )));
            }
        }
        Ok(PackedLayout {
            segments,
            positions,
            token_segment,
        })
    }

    /// One sequence covering all tokens.
    pub fn single(positions: Vec<PositionId>) -> Result<Self> {
        Self::new(&[positions.len()], Some(positions))
    }

    pub fn tokens(&self) -> usize {
        self.token_segment.len()
    }
}
