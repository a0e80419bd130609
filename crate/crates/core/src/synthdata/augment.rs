use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imgproc::BinaryMask;

/// Planar image `[C, H, W]` with values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
        }
    }
}

impl AugmentConfig {
    /// All operations disabled.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            pad: 0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Draws an erasing rectangle `(y, x, h, w)` whose area lies within
/// `cfg.erase_area` of the image. Gives up after 100 draws.
pub fn erase_rect(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Option<(usize, usize, usize, usize)> {
    let total = (height * width) as f64;
    let (lo, hi) = cfg.erase_area;
    let (alo, ahi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
    for _ in 0..100 {
        let target = total * rng.random_range(lo..=hi);
        let aspect = rng.random_range(alo..=ahi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        let area = (h * w) as f64;
        if h == 0 || w == 0 || h > height || w > width || area < lo * total || area > hi * total {
            continue;
        }
        return Some((rng.random_range(0..=height - h), rng.random_range(0..=width - w), h, w));
    }
    None
}

/// Horizontal flip, zero-pad then random crop back to size, and random
/// erasing with uniform noise. The optional mask follows the same spatial
/// transform; erased pixels are cleared in it.
pub fn augment(img: &Planes, mask: Option<&BinaryMask>, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Planes, Option<BinaryMask>) {
    let (c, h, w) = (img.channels, img.height, img.width);
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
    let (dy, dx) = if cfg.pad > 0 {
        (rng.random_range(0..=2 * cfg.pad), rng.random_range(0..=2 * cfg.pad))
    } else {
        (0, 0)
    };
    let src = |y: usize, x: usize| -> Option<(usize, usize)> {
        let (sy, sx) = ((y + dy).checked_sub(cfg.pad)?, (x + dx).checked_sub(cfg.pad)?);
        if sy >= h || sx >= w {
            return None;
        }
        Some((sy, if flip { w - 1 - sx } else { sx }))
    };
    let mut out = Planes::zeros(c, h, w);
    let mut out_mask = mask.map(|_| BinaryMask::zeros(h, w));
    for y in 0..h {
        for x in 0..w {
            if let Some((sy, sx)) = src(y, x) {
                for ch in 0..c {
                    let i = out.idx(ch, y, x);
                    out.data[i] = img.data[img.idx(ch, sy, sx)];
                }
                if let (Some(om), Some(m)) = (out_mask.as_mut(), mask) {
                    om.set(y, x, m.get(sy, sx));
                }
            }
        }
    }
    if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob.min(1.0)) {
        if let Some((y0, x0, eh, ew)) = erase_rect(h, w, cfg, rng) {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for ch in 0..c {
                        let i = out.idx(ch, y, x);
                        out.data[i] = rng.random_range(0.0..255.0);
                    }
                    if let Some(om) = out_mask.as_mut() {
                        om.set(y, x, false);
                    }
                }
            }
        }
    }
    (out, out_mask)
}
