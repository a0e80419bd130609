//! Structural pseudo-label generators: Sobel contours and Harris keypoints.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{BinaryMask, GrayImage, ImgError, Result};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn check_min_size<T: Scalar>(img: &GrayImage<T>, min: usize, op: &str) -> Result<()> {
    if img.height() < min || img.width() < min {
        return Err(ImgError::TooSmall {
            op: op.to_string(),
            height: img.height(),
            width: img.width(),
            min,
        });
    }
    Ok(())
}

/// Sobel responses `(Gx, Gy)` with replicate padding, row-major.
pub fn sobel_gradients<T: Scalar>(img: &GrayImage<T>) -> (Vec<T>, Vec<T>) {
    let (h, w) = (img.height(), img.width());
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (T::zero(), T::zero());
            for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for kx in 0..3 {
                    let v = img.get_clamped(y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    sx += T::lit(rx[kx]) * v;
                    sy += T::lit(ry[kx]) * v;
                }
            }
            gx[y * w + x] = sx;
            gy[y * w + x] = sy;
        }
    }
    (gx, gy)
}

/// Gradient magnitude `√(Gx² + Gy²)`.
pub fn sobel_magnitude<T: Scalar>(img: &GrayImage<T>) -> Vec<T> {
    let (gx, gy) = sobel_gradients(img);
    gx.iter().zip(&gy).map(|(&a, &b)| (a * a + b * b).sqrt()).collect()
}

/// Nearest-rank `q`-quantile of `values`.
pub fn quantile<T: Scalar>(values: &[T], q: f64) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn check_quantile(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(ImgError::InvalidParam(format!("quantile {q} not in (0,1)")));
    }
    Ok(())
}

/// Contour mask: 1 where the Sobel magnitude exceeds its `quantile`.
pub fn sobel_mask<T: Scalar>(img: &GrayImage<T>, quantile_level: f64) -> Result<BinaryMask> {
    check_min_size(img, 3, "sobel_mask")?;
    check_quantile(quantile_level)?;
    let mag = sobel_magnitude(img);
    let thr = quantile(&mag, quantile_level);
    BinaryMask::new(img.height(), img.width(), mag.iter().map(|&m| m > thr).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarrisParams {
    pub k: f64,
    /// Odd Gaussian window size.
    pub window: usize,
    pub sigma: f64,
    pub quantile: f64,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self {
            k: 0.04,
            window: 5,
            sigma: 1.0,
            quantile: 0.99,
        }
    }
}

impl HarrisParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.02..=0.1).contains(&self.k) {
            return Err(ImgError::InvalidParam(format!("harris k {} not in [0.02,0.1]", self.k)));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(ImgError::InvalidParam(format!(
                "harris window {} must be odd and >= 3",
                self.window
            )));
        }
        if self.sigma <= 0.0 {
            return Err(ImgError::InvalidParam("harris sigma must be positive".into()));
        }
        check_quantile(self.quantile)
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a raw plane with replicate padding.
fn blur<T: Scalar>(plane: &[T], h: usize, w: usize, kernel: &[f64]) -> Vec<T> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += T::lit(kv) * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += T::lit(kv) * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Harris response `R = det(M) − k·trace(M)²` of the Gaussian-weighted
/// structure tensor of Sobel gradients.
pub fn harris_response<T: Scalar>(img: &GrayImage<T>, params: &HarrisParams) -> Result<Vec<T>> {
    params.validate()?;
    check_min_size(img, 3, "harris_response")?;
    let (h, w) = (img.height(), img.width());
    let (gx, gy) = sobel_gradients(img);
    let ixx: Vec<T> = gx.iter().map(|&a| a * a).collect();
    let iyy: Vec<T> = gy.iter().map(|&a| a * a).collect();
    let ixy: Vec<T> = gx.iter().zip(&gy).map(|(&a, &b)| a * b).collect();
    let kern = gaussian_kernel(params.window, params.sigma);
    let (sxx, syy, sxy) = (blur(&ixx, h, w, &kern), blur(&iyy, h, w, &kern), blur(&ixy, h, w, &kern));
    let k = T::lit(params.k);
    Ok((0..h * w)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - k * tr * tr
        })
        .collect())
}

/// Keypoint mask: 1 where `R` exceeds its quantile, is positive, and is a
/// 3×3 local maximum. The 1-pixel border is always 0.
pub fn harris_mask<T: Scalar>(img: &GrayImage<T>, params: &HarrisParams) -> Result<BinaryMask> {
    let resp = harris_response(img, params)?;
    let (h, w) = (img.height(), img.width());
    let thr = quantile(&resp, params.quantile);
    let mut mask = BinaryMask::zeros(h, w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let r = resp[y * w + x];
            if !(r > thr && r > T::zero()) {
                continue;
            }
            let is_max = (0..3).all(|dy| {
                (0..3).all(|dx| resp[(y + dy - 1) * w + (x + dx - 1)] <= r)
            });
            if is_max {
                mask.set(y, x, true);
            }
        }
    }
    Ok(mask)
}

/// Max-pools `mask` over `factor×factor` blocks.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 || !mask.height().is_multiple_of(factor) || !mask.width().is_multiple_of(factor) {
        return Err(ImgError::Indivisible {
            height: mask.height(),
            width: mask.width(),
            factor,
        });
    }
    let (oh, ow) = (mask.height() / factor, mask.width() / factor);
    let mut out = BinaryMask::zeros(oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let any = (0..factor)
                .any(|dy| (0..factor).any(|dx| mask.get(oy * factor + dy, ox * factor + dx)));
            out.set(oy, ox, any);
        }
    }
    Ok(out)
}
