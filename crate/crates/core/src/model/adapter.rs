use image::{Rgb, RgbImage};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Pixel ↔ latent codec. A trained VAE would live behind this trait.
pub trait LatentAdapter {
    /// Spatial reduction from pixels to latents.
    fn downsample(&self) -> usize;
    fn channels(&self) -> usize;
    /// `RGB (W·f × H·f) -> [C, H, W]`.
    fn encode(&self, image: &RgbImage) -> Result<Tensor<f32>>;
    /// `[C, H, W] -> RGB (W·f × H·f)`.
    fn decode(&self, latent: &Tensor<f32>) -> Result<RgbImage>;
}

/// Parameter-free adapter for synthetic latents: latent channel `c` carries
/// RGB channel `c mod 3` average-pooled by `factor` and mapped to `[-1, 1]`.
/// Decoding averages each RGB channel's latent copies and maps back to
/// `[0, 255]` with nearest-neighbour upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityAdapter {
    pub channels: usize,
    pub factor: usize,
}

impl IdentityAdapter {
    pub fn new(channels: usize, factor: usize) -> Self {
        IdentityAdapter { channels, factor: factor.max(1) }
    }
}

pub fn to_unit_range(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl LatentAdapter for IdentityAdapter {
    fn downsample(&self) -> usize {
        self.factor
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, image: &RgbImage) -> Result<Tensor<f32>> {
        let f = self.factor as u32;
        let (w, h) = image.dimensions();
        if w % f != 0 || h % f != 0 || w == 0 || h == 0 {
            return Err(shape_err!("image {w}x{h} is not divisible by latent factor {f}"));
        }
        let (lw, lh) = ((w / f) as usize, (h / f) as usize);
        let mut pooled = vec![0f32; 3 * lh * lw];
        let norm = 1.0 / (f * f) as f32;
        for (x, y, px) in image.enumerate_pixels() {
            let (ly, lx) = ((y / f) as usize, (x / f) as usize);
            for k in 0..3 {
                pooled[(k * lh + ly) * lw + lx] += to_unit_range(px[k]) * norm;
            }
        }
        let mut out = Vec::with_capacity(self.channels * lh * lw);
        for c in 0..self.channels {
            let k = c % 3;
            out.extend_from_slice(&pooled[k * lh * lw..(k + 1) * lh * lw]);
        }
        Tensor::from_vec(&[self.channels, lh, lw], out)
    }

    fn decode(&self, latent: &Tensor<f32>) -> Result<RgbImage> {
        let [c, lh, lw] = *latent.shape() else {
            return Err(shape_err!("decode expects [C,H,W], got {:?}", latent.shape()));
        };
        if c == 0 {
            return Err(shape_err!("decode of a zero-channel latent"));
        }
        let data = latent.data();
        let mut rgb = vec![[0f32; 3]; lh * lw];
        let mut counts = [0f32; 3];
        for ch in 0..c {
            let k = ch % 3;
            counts[k] += 1.0;
            for (i, px) in rgb.iter_mut().enumerate() {
                px[k] += data[ch * lh * lw + i];
            }
        }
        let f = self.factor;
        let img = RgbImage::from_fn((lw * f) as u32, (lh * f) as u32, |x, y| {
            let px = rgb[(y as usize / f) * lw + x as usize / f];
            // channels without a latent copy fall back to channel 0
            let get = |k: usize| {
                if counts[k] > 0.0 {
                    px[k] / counts[k]
                } else {
                    px[0] / counts[0]
                }
            };
            Rgb([to_byte(get(0)), to_byte(get(1)), to_byte(get(2))])
        });
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_block_constant_image() {
        let adapter = IdentityAdapter::new(16, 4);
        let img = RgbImage::from_fn(16, 8, |x, y| {
            let (bx, by) = ((x / 4) as u8, (y / 4) as u8);
            Rgb([bx * 40, by * 90, 200 - bx * 10])
        });
        let latent = adapter.encode(&img).unwrap();
        assert_eq!(latent.shape(), &[16, 2, 4]);
        assert_eq!(adapter.decode(&latent).unwrap(), img);
    }

    #[test]
    fn rejects_indivisible_image() {
        let adapter = IdentityAdapter::new(4, 8);
        assert!(adapter.encode(&RgbImage::new(12, 16)).is_err());
    }

    #[test]
    fn decode_clamps() {
        let adapter = IdentityAdapter::new(3, 1);
        let latent = Tensor::from_vec(&[3, 1, 1], vec![5.0, -5.0, 0.0]).unwrap();
        let img = adapter.decode(&latent).unwrap();
        assert_eq!(img.get_pixel(0, 0), &Rgb([255, 0, 128]));
    }
}
