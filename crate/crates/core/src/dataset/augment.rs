use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    #[default]
    Never,
    Always,
    /// Flip with probability ½.
    Random,
}

/// Augmentations applied to sampled frames. The default enables nothing and is the identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Crop `(height, width)` taken at a random offset, resized back to the input size.
    pub crop: Option<(usize, usize)>,
    pub flip: Flip,
    /// Additive brightness offset drawn from `U(−b, b)`.
    pub brightness: f64,
    /// Contrast factor drawn from `U(1 − c, 1 + c)` around the image mean.
    pub contrast: f64,
    pub noise_std: f64,
}

impl AugConfig {
    pub fn is_identity(&self) -> bool {
        self.crop.is_none()
            && self.flip == Flip::Never
            && self.brightness == 0.0
            && self.contrast == 0.0
            && self.noise_std == 0.0
    }
}

pub fn hflip(image: &Image) -> Image {
    let (h, w) = (image.shape.height, image.shape.width);
    let mut out = image.clone();
    for c in 0..image.shape.channels {
        for y in 0..h {
            let row = (c * h + y) * w;
            for x in 0..w {
                out.data[row + x] = image.data[row + w - 1 - x];
            }
        }
    }
    out
}

fn crop_resize(image: &Image, top: usize, left: usize, ch: usize, cw: usize) -> Image {
    let (h, w) = (image.shape.height, image.shape.width);
    let mut out = Image::zeros(image.shape);
    let sy = if h > 1 { (ch - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let sx = if w > 1 { (cw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    for c in 0..image.shape.channels {
        for y in 0..h {
            let fy = top as f64 + y as f64 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(top + ch - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = left as f64 + x as f64 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(left + cw - 1);
                let tx = fx - x0 as f64;
                let top_row = image.at(c, y0, x0) * (1.0 - tx) + image.at(c, y0, x1) * tx;
                let bottom_row = image.at(c, y1, x0) * (1.0 - tx) + image.at(c, y1, x1) * tx;
                out.data[(c * h + y) * w + x] = top_row * (1.0 - ty) + bottom_row * ty;
            }
        }
    }
    out
}

/// Applies the enabled augmentations in the order crop → flip → brightness/contrast → noise.
/// Random draws happen only for enabled steps.
pub fn augment(image: &Image, config: &AugConfig, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = (image.shape.height, image.shape.width);
    let mut out = match config.crop {
        Some((ch, cw)) if ch > h || cw > w || ch == 0 || cw == 0 => {
            return Err(Error::Invalid(format!(
                "crop {ch}×{cw} does not fit in a {h}×{w} image"
            )))
        }
        Some((ch, cw)) => {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            crop_resize(image, top, left, ch, cw)
        }
        None => image.clone(),
    };
    let flip = match config.flip {
        Flip::Never => false,
        Flip::Always => true,
        Flip::Random => rng.random_bool(0.5),
    };
    if flip {
        out = hflip(&out);
    }
    if config.brightness > 0.0 || config.contrast > 0.0 {
        let b = if config.brightness > 0.0 {
            rng.random_range(-config.brightness..=config.brightness)
        } else {
            0.0
        };
        let k = if config.contrast > 0.0 {
            rng.random_range(1.0 - config.contrast..=1.0 + config.contrast)
        } else {
            1.0
        };
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        out.data.iter_mut().for_each(|v| *v = (*v - mean) * k + mean + b);
    }
    if config.noise_std > 0.0 {
        let n = Normal::new(0.0, config.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
        out.data.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    Ok(out)
}
