use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGE1_SIDE: u32 = 256;
pub const STAGE2_AREA: f64 = 250_000.0;
pub const STAGE2_MULTIPLE: u32 = 64;
pub const MAX_ASPECT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Short edge to 256, random 256×256 crop.
    #[serde(rename = "stage1")]
    One,
    /// Area to about 250k pixels, centre crop to multiples of 64.
    #[serde(rename = "stage2")]
    Two,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::Validation(format!("stage must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ResizePlan {
    Resize {
        /// Dimensions after scaling, `(width, height)`.
        scaled: (u32, u32),
        /// Crop origin `(x, y)` within the scaled image.
        origin: (u32, u32),
        /// Final dimensions, `(width, height)`.
        output: (u32, u32),
    },
    Skip {
        aspect: f64,
    },
}

/// Plans the resize and crop of a `width × height` image for `stage`.
/// `rng` only drives the stage-1 crop position.
pub fn stage_resize<R: Rng + ?Sized>(width: u32, height: u32, stage: Stage, rng: &mut R) -> Result<ResizePlan> {
    if width == 0 || height == 0 {
        return Err(Error::Validation(format!("degenerate image {width}x{height}")));
    }
    let (w, h) = (width as f64, height as f64);
    match stage {
        Stage::One => {
            let f = STAGE1_SIDE as f64 / w.min(h);
            let scaled = if width <= height {
                (STAGE1_SIDE, ((h * f).round() as u32).max(STAGE1_SIDE))
            } else {
                (((w * f).round() as u32).max(STAGE1_SIDE), STAGE1_SIDE)
            };
            let origin = (
                rng.random_range(0..=scaled.0 - STAGE1_SIDE),
                rng.random_range(0..=scaled.1 - STAGE1_SIDE),
            );
            Ok(ResizePlan::Resize { scaled, origin, output: (STAGE1_SIDE, STAGE1_SIDE) })
        }
        Stage::Two => {
            let aspect = w.max(h) / w.min(h);
            if aspect >= MAX_ASPECT {
                return Ok(ResizePlan::Skip { aspect });
            }
            let f = (STAGE2_AREA / (w * h)).sqrt();
            let scaled = (((w * f).round() as u32).max(1), ((h * f).round() as u32).max(1));
            let output = (
                scaled.0 / STAGE2_MULTIPLE * STAGE2_MULTIPLE,
                scaled.1 / STAGE2_MULTIPLE * STAGE2_MULTIPLE,
            );
            let origin = ((scaled.0 - output.0) / 2, (scaled.1 - output.1) / 2);
            Ok(ResizePlan::Resize { scaled, origin, output })
        }
    }
}

/// Executes a plan; `None` for a skip.
pub fn apply_resize(image: &RgbImage, plan: &ResizePlan) -> Option<RgbImage> {
    match *plan {
        ResizePlan::Skip { .. } => None,
        ResizePlan::Resize { scaled, origin, output } => {
            let resized = if image.dimensions() == scaled {
                image.clone()
            } else {
                imageops::resize(image, scaled.0, scaled.1, FilterType::Triangle)
            };
            Some(imageops::crop_imm(&resized, origin.0, origin.1, output.0, output.1).to_image())
        }
    }
}
