use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::imgproc::{GrayImage, RgbImage};

/// Number of fine-grained categories.
pub const NUM_CATEGORIES: usize = 8;

/// Fine-grained object geometry in body coordinates: the body runs along x
/// over `[-0.5, 0.5]`, y is lateral. All categories share body and tail;
/// they differ in wing placement, span and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: usize,
    pub body_width: f64,
    pub wing_pos: f64,
    pub wing_span: f64,
    pub wing_sweep: f64,
    pub wing_chord: f64,
}

type Polygon = Vec<(f64, f64)>;

impl ObjectSpec {
    /// Category prototype (no jitter).
    pub fn prototype(category: usize) -> Self {
        assert!(category < NUM_CATEGORIES, "category {category} out of range");
        let pos = [0.12, -0.08][category & 1];
        let span = [0.55, 0.95][(category >> 1) & 1];
        let sweep = [0.0, 0.22][(category >> 2) & 1];
        Self {
            category,
            body_width: 0.16,
            wing_pos: pos,
            wing_span: span,
            wing_sweep: sweep,
            wing_chord: 0.2,
        }
    }

    /// Prototype with per-instance jitter of a few percent.
    pub fn sample(category: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = Self::prototype(category);
        let mut j = |v: f64, rel: f64| v + rng.random_range(-rel..rel);
        Self {
            category,
            body_width: j(p.body_width, 0.08 * p.body_width),
            wing_pos: j(p.wing_pos, 0.02),
            wing_span: j(p.wing_span, 0.04 * p.wing_span),
            wing_sweep: j(p.wing_sweep, 0.02),
            wing_chord: j(p.wing_chord, 0.08 * p.wing_chord),
        }
    }

    fn polygons(&self) -> Vec<Polygon> {
        let w = self.body_width / 2.0;
        let body = vec![(-0.5, -w), (0.38, -w), (0.5, 0.0), (0.38, w), (-0.5, w)];
        let mut polys = vec![body];
        let (p, c, s, sw) = (self.wing_pos, self.wing_chord, self.wing_span / 2.0, self.wing_sweep);
        for side in [-1.0, 1.0] {
            polys.push(vec![
                (p + c / 2.0, 0.0),
                (p + c / 2.0 - sw, side * s),
                (p + c / 2.0 - sw - 0.08, side * s),
                (p - c / 2.0, 0.0),
            ]);
            polys.push(vec![(-0.36, 0.0), (-0.44, side * 0.15), (-0.5, side * 0.15), (-0.5, 0.0)]);
        }
        polys
    }

    /// Point scatterers: nose, tail, wing roots and tips, mid-wing.
    pub fn scattering_centers(&self) -> Vec<(f64, f64)> {
        let (p, c, s, sw) = (self.wing_pos, self.wing_chord, self.wing_span / 2.0, self.wing_sweep);
        let mut pts = vec![(0.5, 0.0), (-0.5, 0.0)];
        for side in [-1.0, 1.0] {
            pts.push((p + c / 2.0 - sw - 0.04, side * s));
            pts.push((p + c / 2.0 - sw / 2.0 - 0.02, side * s / 2.0));
            pts.push((-0.47, side * 0.15));
        }
        pts
    }

    /// True when the body-frame point lies inside the silhouette.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polygons().iter().any(|poly| point_in_polygon(poly, x, y))
    }
}

fn point_in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Ranges of the random similarity transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseJitter {
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Body length as a fraction of the image side.
    pub length: (f64, f64),
    /// Centre offset as a fraction of the image side.
    pub max_shift: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            length: (0.6, 0.78),
            max_shift: 0.06,
        }
    }
}

/// Similarity transform from body frame to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub angle: f64,
    /// Body length in pixels.
    pub length: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Pose {
    pub fn sample(size: usize, j: &PoseJitter, rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let r = j.max_rotation_deg.to_radians();
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angle = sym(r);
        let (cx, cy) = (s / 2.0 + sym(j.max_shift) * s, s / 2.0 + sym(j.max_shift) * s);
        let (lo, hi) = j.length;
        let length = s * if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self { angle, length, cx, cy }
    }

    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let (sn, cs) = self.angle.sin_cos();
        let (u, v) = (x * self.length, y * self.length);
        (self.cx + cs * u - sn * v, self.cy + sn * u + cs * v)
    }

    pub fn to_body(&self, px: f64, py: f64) -> (f64, f64) {
        let (sn, cs) = self.angle.sin_cos();
        let (u, v) = (px - self.cx, py - self.cy);
        ((cs * u + sn * v) / self.length, (-sn * u + cs * v) / self.length)
    }
}

/// Silhouette coverage in `[0,1]` per pixel, 4×4 supersampled.
pub fn coverage(spec: &ObjectSpec, pose: &Pose, size: usize) -> Vec<f64> {
    let polys = spec.polygons();
    let mut out = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let (x, y) = pose.to_body(px as f64 + (sx as f64 + 0.5) / 4.0, py as f64 + (sy as f64 + 0.5) / 4.0);
                    if polys.iter().any(|p| point_in_polygon(p, x, y)) {
                        hits += 1;
                    }
                }
            }
            out[py * size + px] = hits as f64 / 16.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticalStyle {
    /// Background clutter rectangles.
    pub clutter: usize,
    pub noise_sigma: f64,
    /// Fixed background level; random gradient when `None`.
    pub background: Option<f64>,
    pub texture: f64,
    pub pose: PoseJitter,
}

impl Default for OpticalStyle {
    fn default() -> Self {
        Self {
            clutter: 6,
            noise_sigma: 4.0,
            background: None,
            texture: 8.0,
            pose: PoseJitter::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarStyle {
    /// Speckle looks (gamma shape); `None` disables speckle.
    pub looks: Option<f64>,
    pub background: f64,
    pub body: f64,
    pub blob_amplitude: f64,
    pub blob_sigma: f64,
    pub pose: PoseJitter,
}

impl Default for SarStyle {
    fn default() -> Self {
        Self {
            looks: Some(4.0),
            background: 22.0,
            body: 45.0,
            blob_amplitude: 230.0,
            blob_sigma: 1.0,
            pose: PoseJitter::default(),
        }
    }
}

/// Textured silhouette over a cluttered background, random pose.
pub fn render_optical(spec: &ObjectSpec, size: usize, style: &OpticalStyle, rng: &mut ChaCha8Rng) -> (RgbImage<f64>, Pose) {
    let pose = Pose::sample(size, &style.pose, rng);
    let cov = coverage(spec, &pose, size);
    let (bg0, gx, gy) = match style.background {
        Some(b) => (b, 0.0, 0.0),
        None => (
            rng.random_range(50.0..100.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
        ),
    };
    let s = size as f64;
    let mut bg: Vec<f64> = (0..size * size)
        .map(|i| bg0 + gx * ((i % size) as f64 / s - 0.5) + gy * ((i / size) as f64 / s - 0.5))
        .collect();
    for _ in 0..style.clutter {
        let (w, h) = (rng.random_range(2..9), rng.random_range(2..9));
        let (x0, y0) = (rng.random_range(0..size - w), rng.random_range(0..size - h));
        let delta = rng.random_range(-30.0..30.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                bg[y * size + x] += delta;
            }
        }
    }
    let base = rng.random_range(170.0..215.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-15.0..15.0));
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let channels: [GrayImage<f64>; 3] = std::array::from_fn(|c| {
        let data: Vec<f64> = (0..size * size)
            .map(|i| {
                let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                let (bx, _) = pose.to_body(px, py);
                let obj = base + tint[c] + style.texture * (bx * 6.0 * std::f64::consts::TAU).sin();
                let v = bg[i] * (1.0 - cov[i]) + obj * cov[i];
                if style.noise_sigma > 0.0 {
                    v + noise.sample(rng)
                } else {
                    v
                }
            })
            .collect();
        GrayImage::new(size, size, data).expect("size matches")
    });
    let [r, g, b] = channels;
    (RgbImage::new(r, g, b).expect("equal sizes"), pose)
}

/// Bright point scatterers over weak diffuse body return, multiplicative
/// gamma speckle, independent random pose.
pub fn render_sar(spec: &ObjectSpec, size: usize, style: &SarStyle, rng: &mut ChaCha8Rng) -> (GrayImage<f64>, Pose, Vec<(f64, f64)>) {
    let pose = Pose::sample(size, &style.pose, rng);
    let cov = coverage(spec, &pose, size);
    let centers: Vec<(f64, f64)> = spec
        .scattering_centers()
        .into_iter()
        .map(|(x, y)| pose.to_pixel(x, y))
        .collect();
    let amps: Vec<f64> = centers.iter().map(|_| rng.random_range(0.7..1.0)).collect();
    let two_s2 = 2.0 * style.blob_sigma * style.blob_sigma;
    let speckle = style
        .looks
        .map(|l| Gamma::new(l, 1.0 / l).expect("positive looks"));
    let data: Vec<f64> = (0..size * size)
        .map(|i| {
            let (px, py) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let mut v = style.background + style.body * cov[i];
            for (&(cx, cy), &a) in centers.iter().zip(&amps) {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                v += style.blob_amplitude * a * (-d2 / two_s2).exp();
            }
            match &speckle {
                Some(g) => v * g.sample(rng),
                None => v,
            }
        })
        .collect();
    (GrayImage::new(size, size, data).expect("size matches"), pose, centers)
}
