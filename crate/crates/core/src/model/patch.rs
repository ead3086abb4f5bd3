//! Space-to-depth patch tokens (pixel unshuffle) and its inverse.
//!
//! Token order is row-major over the patch grid; within a token, features
//! are ordered `(channel, dy, dx)`.

use crate::error::{shape_err, Result};
use crate::nn::PositionId;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl LatentGeometry {
    /// Accepts `[C, H, W]` or `[B, C, H, W]`.
    pub fn of(shape: &[usize], patch: usize) -> Result<Self> {
        let (batch, c, h, w) = match *shape {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(shape_err!("latent must be [C,H,W] or [B,C,H,W], got {:?}", shape)),
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err!(
                "latent {h}x{w} is not divisible by patch size {patch}"
            ));
        }
        Ok(LatentGeometry {
            batch,
            channels: c,
            height: h,
            width: w,
            patch,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_image(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Grid coordinates `(row, col)` of each token of one image.
    pub fn grid_positions(&self) -> Vec<(usize, usize)> {
        let (gh, gw) = self.grid();
        (0..gh).flat_map(|r| (0..gw).map(move |c| (r, c))).collect()
    }

    /// For every token feature, the flat latent index it reads.
    fn patch_index(&self) -> Vec<usize> {
        let (gh, gw) = self.grid();
        let (c, h, w, p) = (self.channels, self.height, self.width, self.patch);
        let mut idx = Vec::with_capacity(self.batch * c * h * w);
        for b in 0..self.batch {
            for r in 0..gh {
                for col in 0..gw {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                idx.push(((b * c + ch) * h + r * p + dy) * w + col * p + dx);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    fn unpatch_index(&self) -> Vec<usize> {
        let fwd = self.patch_index();
        let mut inv = vec![0; fwd.len()];
        for (token_pos, &latent_pos) in fwd.iter().enumerate() {
            inv[latent_pos] = token_pos;
        }
        inv
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }
}

/// `[B,C,H,W] -> [B·(H/p)·(W/p), p²·C]`, plus grid positions of one image.
pub fn patchify<T: Element>(latent: &Tensor<T>, patch: usize) -> Result<(Tensor<T>, Vec<PositionId>)> {
    let g = LatentGeometry::of(latent.shape(), patch)?;
    let tokens = latent.gather_flat(
        &g.patch_index(),
        &[g.batch * g.tokens_per_image(), g.token_dim()],
    )?;
    let positions = g
        .grid_positions()
        .into_iter()
        .map(|(r, c)| PositionId::image(r, c))
        .collect();
    Ok((tokens, positions))
}

/// Inverse of [`patchify`]; returns `[B,C,H,W]`.
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, geometry: &LatentGeometry) -> Result<Tensor<T>> {
    let expected = [geometry.batch * geometry.tokens_per_image(), geometry.token_dim()];
    if tokens.shape() != expected {
        return Err(shape_err!(
            "unpatchify expects {:?} tokens, got {:?}",
            expected,
            tokens.shape()
        ));
    }
    tokens.gather_flat(&geometry.unpatch_index(), &geometry.latent_shape())
}
