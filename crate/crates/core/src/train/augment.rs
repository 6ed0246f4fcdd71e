//! Random crop after zero padding, and horizontal mirroring.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    #[serde(default)]
    pub crop: bool,
    #[serde(default)]
    pub mirror: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_pad() -> usize {
    4
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            crop: false,
            mirror: false,
            pad: default_pad(),
        }
    }
}

impl Augment {
    pub const fn is_identity(&self) -> bool {
        !self.mirror && (!self.crop || self.pad == 0)
    }
}

/// The window at offset `(dy, dx)` of `image` zero-padded by `pad`,
/// optionally mirrored left to right. Output has the input's size.
pub fn crop_mirror(image: &[f64], dims: (usize, usize, usize), pad: usize, dy: usize, dx: usize, mirror: bool) -> Vec<f64> {
    let (c, h, w) = dims;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy).checked_sub(pad).filter(|&v| v < h);
            let Some(sy) = sy else { continue };
            for x in 0..w {
                let xo = if mirror { w - 1 - x } else { x };
                if let Some(sx) = (xo + dx).checked_sub(pad).filter(|&v| v < w) {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}

/// Draws crop offsets uniformly from `0..=2*pad` on each axis, then a fair
/// mirror coin.
pub fn draw(cfg: &Augment, rng: &mut Rng) -> (usize, usize, bool) {
    let (dy, dx) = if cfg.crop {
        (rng.below(2 * cfg.pad + 1), rng.below(2 * cfg.pad + 1))
    } else {
        (cfg.pad, cfg.pad)
    };
    (dy, dx, cfg.mirror && rng.coin())
}

pub fn augment(image: &[f64], dims: (usize, usize, usize), cfg: &Augment, rng: &mut Rng) -> Vec<f64> {
    if cfg.is_identity() {
        return image.to_vec();
    }
    let (dy, dx, m) = draw(cfg, rng);
    crop_mirror(image, dims, cfg.pad, dy, dx, m)
}
