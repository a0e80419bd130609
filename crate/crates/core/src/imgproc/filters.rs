//! Modality-specific preprocessing operators. All outputs are clamped to
//! `[0, 255]` and borders use replicate padding.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::image::clamp255;
use super::{GrayImage, ImgError, Result, RgbImage};

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(ImgError::InvalidParam(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Edge-preserving bilateral filter with a `⌈2σ_space⌉` radius window.
pub fn bilateral_filter<T: Scalar>(
    img: &GrayImage<T>,
    sigma_space: f64,
    sigma_range: f64,
) -> Result<GrayImage<T>> {
    positive("sigma_space", sigma_space)?;
    positive("sigma_range", sigma_range)?;
    let r = (2.0 * sigma_space).ceil() as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| {
            (-r..=r).map(move |dx| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_space * sigma_space)).exp())
        })
        .collect();
    let inv_range = T::lit(-1.0 / (2.0 * sigma_range * sigma_range));
    let side = (2 * r + 1) as usize;
    Ok(GrayImage::from_fn(img.height(), img.width(), |y, x| {
        let center = img.get(y, x);
        let (mut num, mut den) = (T::zero(), T::zero());
        for dy in -r..=r {
            for dx in -r..=r {
                let v = img.get_clamped(y as isize + dy, x as isize + dx);
                let diff = v - center;
                let wgt = T::lit(spatial[(dy + r) as usize * side + (dx + r) as usize])
                    * (diff * diff * inv_range).exp();
                num += wgt * v;
                den += wgt;
            }
        }
        num / den
    }))
}

/// `out = img − strength·∇²img` with the 4-neighbour Laplacian.
pub fn laplacian_sharpen<T: Scalar>(img: &GrayImage<T>, strength: f64) -> Result<GrayImage<T>> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(ImgError::InvalidParam(format!("strength {strength}")));
    }
    let s = T::lit(strength);
    Ok(GrayImage::from_fn(img.height(), img.width(), |y, x| {
        let (yi, xi) = (y as isize, x as isize);
        let c = img.get(y, x);
        let lap = img.get_clamped(yi - 1, xi)
            + img.get_clamped(yi + 1, xi)
            + img.get_clamped(yi, xi - 1)
            + img.get_clamped(yi, xi + 1)
            - T::lit(4.0) * c;
        c - s * lap
    }))
}

/// Median over a `window×window` neighbourhood.
pub fn median_filter<T: Scalar>(img: &GrayImage<T>, window: usize) -> Result<GrayImage<T>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(ImgError::InvalidParam(format!("median window {window} must be odd")));
    }
    let r = (window / 2) as isize;
    let mut buf = Vec::with_capacity(window * window);
    Ok(GrayImage::from_fn(img.height(), img.width(), |y, x| {
        buf.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                buf.push(img.get_clamped(y as isize + dy, x as isize + dx));
            }
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        buf[buf.len() / 2]
    }))
}

/// Zeroes every pixel below `floor`.
pub fn threshold_suppress<T: Scalar>(img: &GrayImage<T>, floor: f64) -> Result<GrayImage<T>> {
    if !(0.0..=255.0).contains(&floor) {
        return Err(ImgError::InvalidParam(format!("threshold floor {floor}")));
    }
    let f = T::lit(floor);
    Ok(img.map(|v| if v < f { T::zero() } else { v }))
}

/// Tile grid of a CLAHE run: `tiles_y × tiles_x` lookup tables over 256
/// intensity bins.
#[derive(Debug, Clone)]
pub struct ClaheTiles {
    pub tiles_y: usize,
    pub tiles_x: usize,
    /// Tile bounds `[start, end)` along y and x.
    pub bounds_y: Vec<(usize, usize)>,
    pub bounds_x: Vec<(usize, usize)>,
    /// One 256-entry mapping per tile, row-major over tiles.
    pub luts: Vec<[f64; 256]>,
}

fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|t| (t * len / tiles, (t + 1) * len / tiles)).collect()
}

#[inline]
fn bin_of<T: Scalar>(v: T) -> usize {
    v.to_f64_lossy().round().clamp(0.0, 255.0) as usize
}

/// Clipped-histogram equalization tables for every tile.
pub fn clahe_tiles<T: Scalar>(
    img: &GrayImage<T>,
    clip_limit: f64,
    tiles: (usize, usize),
) -> Result<ClaheTiles> {
    positive("clip_limit", clip_limit)?;
    let (ty, tx) = tiles;
    if ty == 0 || tx == 0 || ty > img.height() || tx > img.width() {
        return Err(ImgError::InvalidParam(format!(
            "clahe tiles {ty}x{tx} for {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let bounds_y = tile_bounds(img.height(), ty);
    let bounds_x = tile_bounds(img.width(), tx);
    let mut luts = Vec::with_capacity(ty * tx);
    for &(y0, y1) in &bounds_y {
        for &(x0, x1) in &bounds_x {
            let mut hist = [0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(img.get(y, x))] += 1.0;
                }
            }
            let total = ((y1 - y0) * (x1 - x0)) as f64;
            let limit = (clip_limit * total / 256.0).max(1.0);
            let mut excess = 0.0;
            for h in hist.iter_mut() {
                if *h > limit {
                    excess += *h - limit;
                    *h = limit;
                }
            }
            let share = excess / 256.0;
            let mut lut = [0f64; 256];
            let mut cdf = 0.0;
            for (l, h) in lut.iter_mut().zip(hist.iter()) {
                cdf += h + share;
                *l = (cdf / total * 255.0).clamp(0.0, 255.0);
            }
            luts.push(lut);
        }
    }
    Ok(ClaheTiles {
        tiles_y: ty,
        tiles_x: tx,
        bounds_y,
        bounds_x,
        luts,
    })
}

/// Interpolation neighbours `(i0, i1, frac)` of `pos` among tile centres.
fn tile_weight(pos: usize, bounds: &[(usize, usize)]) -> (usize, usize, f64) {
    let p = pos as f64 + 0.5;
    let centers: Vec<f64> = bounds.iter().map(|&(a, b)| (a + b) as f64 / 2.0).collect();
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    let last = centers.len() - 1;
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).unwrap_or(0);
    let f = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, f)
}

/// Contrast-limited adaptive histogram equalization with bilinear
/// interpolation between tile mappings.
pub fn clahe<T: Scalar>(
    img: &GrayImage<T>,
    clip_limit: f64,
    tiles: (usize, usize),
) -> Result<GrayImage<T>> {
    let t = clahe_tiles(img, clip_limit, tiles)?;
    Ok(GrayImage::from_fn(img.height(), img.width(), |y, x| {
        let b = bin_of(img.get(y, x));
        let (y0, y1, fy) = tile_weight(y, &t.bounds_y);
        let (x0, x1, fx) = tile_weight(x, &t.bounds_x);
        let lut = |ty: usize, tx: usize| t.luts[ty * t.tiles_x + tx][b];
        let top = lut(y0, x0) * (1.0 - fx) + lut(y0, x1) * fx;
        let bot = lut(y1, x0) * (1.0 - fx) + lut(y1, x1) * fx;
        clamp255(T::lit(top * (1.0 - fy) + bot * fy))
    }))
}

/// Operator parameters for both preprocessing chains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub bilateral_sigma_space: f64,
    pub bilateral_sigma_range: f64,
    pub sharpen_strength: f64,
    pub median_window: usize,
    pub clahe_clip_limit: f64,
    pub clahe_tiles: (usize, usize),
    pub threshold_floor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bilateral_sigma_space: 3.0,
            bilateral_sigma_range: 25.0,
            sharpen_strength: 0.5,
            median_window: 3,
            clahe_clip_limit: 2.0,
            clahe_tiles: (8, 8),
            threshold_floor: 30.0,
        }
    }
}

/// Optical chain: bilateral filter then Laplacian sharpening, per channel.
pub fn preprocess_optical<T: Scalar>(img: &RgbImage<T>, cfg: &PreprocessConfig) -> Result<RgbImage<T>> {
    img.map_channels(|c| {
        let smooth = bilateral_filter(c, cfg.bilateral_sigma_space, cfg.bilateral_sigma_range)?;
        laplacian_sharpen(&smooth, cfg.sharpen_strength)
    })
}

/// SAR chain: median despeckling, CLAHE, then weak-response suppression.
pub fn preprocess_sar<T: Scalar>(img: &GrayImage<T>, cfg: &PreprocessConfig) -> Result<GrayImage<T>> {
    let despeckled = median_filter(img, cfg.median_window)?;
    let equalized = clahe(&despeckled, cfg.clahe_clip_limit, cfg.clahe_tiles)?;
    threshold_suppress(&equalized, cfg.threshold_floor)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Scalar CLAHE tile mapping written independently of `clahe_tiles`:
    /// integer histogram, iterative clipping, plain running sum.
    fn reference_tile_lut(pixels: &[u8], clip_limit: f64) -> [f64; 256] {
        let mut hist = vec![0f64; 256];
        for &p in pixels {
            hist[p as usize] += 1.0;
        }
        let n = pixels.len() as f64;
        let limit = f64::max(clip_limit * n / 256.0, 1.0);
        let clipped: f64 = hist.iter().map(|&h| f64::max(h - limit, 0.0)).sum();
        let mut out = [0f64; 256];
        let mut running = 0.0;
        for i in 0..256 {
            running += f64::min(hist[i], limit) + clipped / 256.0;
            out[i] = f64::min(f64::max(running * 255.0 / n, 0.0), 255.0);
        }
        out
    }

    #[test]
    fn median_identity_on_constant_and_kills_single_outlier() {
        let c = GrayImage::filled(7, 7, 42.0f64);
        assert_eq!(median_filter(&c, 3).unwrap(), c);
        let mut vals = vec![0.0; 9];
        vals[4] = 255.0;
        let img = GrayImage::new(3, 3, vals).unwrap();
        assert_eq!(median_filter(&img, 3).unwrap().get(1, 1), 0.0);
        assert!(median_filter(&img, 2).is_err());
    }

    #[test]
    fn constant_images_stay_constant() {
        let c = GrayImage::filled(16, 16, 77.0f64);
        assert!(bilateral_filter(&c, 3.0, 25.0).unwrap().is_constant());
        assert_eq!(laplacian_sharpen(&c, 0.5).unwrap(), c);
        assert!(clahe(&c, 2.0, (4, 4)).unwrap().is_constant());
        assert!(threshold_suppress(&c, 30.0).unwrap().is_constant());
        let rgb = RgbImage::from_gray(&c);
        let out = preprocess_optical(&rgb, &PreprocessConfig::default()).unwrap();
        assert!(out.channels.iter().all(|ch| ch.is_constant()));
        assert!(preprocess_sar(&c, &PreprocessConfig::default()).unwrap().is_constant());
    }

    #[test]
    fn invalid_parameters_error() {
        let img = GrayImage::filled(8, 8, 1.0f64);
        assert!(bilateral_filter(&img, 0.0, 1.0).is_err());
        assert!(laplacian_sharpen(&img, -1.0).is_err());
        assert!(clahe(&img, 2.0, (0, 2)).is_err());
        assert!(clahe(&img, -1.0, (2, 2)).is_err());
        assert!(threshold_suppress(&img, 300.0).is_err());
    }

    #[test]
    fn threshold_zeroes_weak_pixels() {
        let img = GrayImage::new(1, 3, vec![10.0, 30.0, 200.0]).unwrap();
        assert_eq!(threshold_suppress(&img, 30.0).unwrap().data(), &[0.0, 30.0, 200.0]);
    }

    #[test]
    fn bilateral_preserves_step_better_than_box() {
        let img = GrayImage::<f64>::from_fn(12, 12, |_, x| if x >= 6 { 200.0 } else { 50.0 });
        let out = bilateral_filter(&img, 3.0, 25.0).unwrap();
        assert!((out.get(6, 5) - 50.0).abs() < 1.0);
        assert!((out.get(6, 6) - 200.0).abs() < 1.0);
    }

    proptest! {
        #[test]
        fn clahe_matches_reference_and_is_monotone(vals in proptest::collection::vec(0u8..=255, 16 * 16), clip in 0.5f64..4.0) {
            let img = GrayImage::<f64>::from_u8(16, 16, &vals).unwrap();
            let t = clahe_tiles(&img, clip, (2, 2)).unwrap();
            for (ti, lut) in t.luts.iter().enumerate() {
                let (y0, y1) = t.bounds_y[ti / 2];
                let (x0, x1) = t.bounds_x[ti % 2];
                let pix: Vec<u8> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| vals[y * 16 + x]).collect();
                let want = reference_tile_lut(&pix, clip);
                for i in 0..256 {
                    prop_assert!((lut[i] - want[i]).abs() < 1e-9);
                    if i > 0 {
                        prop_assert!(lut[i] >= lut[i - 1]);
                    }
                }
            }
            let out = clahe(&img, clip, (2, 2)).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }

        #[test]
        fn operators_stay_in_range(vals in proptest::collection::vec(0u8..=255, 10 * 10)) {
            let img = GrayImage::<f64>::from_u8(10, 10, &vals).unwrap();
            for out in [
                bilateral_filter(&img, 2.0, 20.0).unwrap(),
                laplacian_sharpen(&img, 1.0).unwrap(),
                median_filter(&img, 3).unwrap(),
                threshold_suppress(&img, 50.0).unwrap(),
            ] {
                prop_assert!(out.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
            }
        }
    }
}
