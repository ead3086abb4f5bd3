use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Two-axis token coordinate. Text tokens sit on row 0, image patches on
/// rows `1..`, so the two families never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PositionId {
    pub axis0: u32,
    pub axis1: u32,
}

impl PositionId {
    pub fn new(axis0: u32, axis1: u32) -> Self {
        PositionId { axis0, axis1 }
    }

    pub fn text(index: usize) -> Self {
        PositionId::new(0, index as u32)
    }

    pub fn image(row: usize, col: usize) -> Self {
        PositionId::new(row as u32 + 1, col as u32)
    }
}

/// Per-token `(cos, sin)` tables, `[tokens, head_dim/2]` each.
fn angle_tables(pos: &[PositionId], head_dim: usize, theta: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let pairs = half / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|j| theta.powf(-(2.0 * j as f64) / half as f64))
        .collect();
    let mut cos = Vec::with_capacity(pos.len() * half);
    let mut sin = Vec::with_capacity(pos.len() * half);
    for p in pos {
        for coord in [p.axis0, p.axis1] {
            for f in &freqs {
                let a = coord as f64 * f;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    (cos, sin)
}

fn rotate<T: Element>(
    x: &[T],
    cos: &[f64],
    sin: &[f64],
    tokens: usize,
    heads: usize,
    head_dim: usize,
    inverse: bool,
) -> Vec<T> {
    let half_pairs = head_dim / 2;
    let mut out = vec![T::zero(); x.len()];
    for t in 0..tokens {
        let c = &cos[t * half_pairs..(t + 1) * half_pairs];
        let s = &sin[t * half_pairs..(t + 1) * half_pairs];
        for h in 0..heads {
            let base = (t * heads + h) * head_dim;
            for j in 0..half_pairs {
                let (cj, sj) = (T::from_f64(c[j]), T::from_f64(s[j]));
                let sj = if inverse { -sj } else { sj };
                let (a, b) = (x[base + 2 * j], x[base + 2 * j + 1]);
                out[base + 2 * j] = a * cj - b * sj;
                out[base + 2 * j + 1] = a * sj + b * cj;
            }
        }
    }
    out
}

/// Rotates `x: [tokens, heads, head_dim]` by 2D rotary angles. The first
/// half of each head vector turns with `axis0`, the second with `axis1`,
/// adjacent pairs `(2j, 2j+1)` at frequency `theta^(-2j / (head_dim/2))`.
pub fn rope2d_rotate<T: Element>(x: &Tensor<T>, pos: &[PositionId], theta: f64) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(shape_err!("rope2d expects [tokens, heads, head_dim], got {:?}", shape));
    }
    let (tokens, heads, head_dim) = (shape[0], shape[1], shape[2]);
    if head_dim % 4 != 0 {
        return Err(Error::Config(format!(
            "2D RoPE needs head_dim divisible by 4, got {head_dim}"
        )));
    }
    if pos.len() != tokens {
        return Err(shape_err!("{} positions for {} tokens", pos.len(), tokens));
    }
    let (cos, sin) = angle_tables(pos, head_dim, theta);
    let out = rotate(&x.data(), &cos, &sin, tokens, heads, head_dim, false);
    Ok(Tensor::from_op(
        shape.to_vec(),
        out,
        "rope2d",
        vec![x.clone()],
        Box::new(move |_, g, _| vec![Some(rotate(g, &cos, &sin, tokens, heads, head_dim, true))]),
    ))
}
