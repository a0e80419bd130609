use std::path::Path;

use crate::scalar::Scalar;

use super::{ImgError, Result};

/// Single-channel image with intensities in `[0, 255]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    /// Values are clamped into `[0, 255]`.
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(ImgError::Dimensions(format!(
                "{height}x{width} with {} values",
                data.len()
            )));
        }
        let data = data.into_iter().map(clamp255).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![clamp255(value); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp255(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Pixel with replicate (clamp-to-edge) border handling.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> T {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| clamp255(f(v))).collect(),
        }
    }

    /// Rotates 90° counter-clockwise.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn is_constant(&self) -> bool {
        self.data.iter().all(|&v| v == self.data[0])
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.to_f64_lossy().round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| T::lit(b as f64)).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| ImgError::Dimensions("buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads any PNG, converting to 8-bit luma.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::from_u8(h as usize, w as usize, img.as_raw())
    }
}

/// Three-channel image stored as planes `[R, G, B]`, each `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage<T> {
    pub channels: [GrayImage<T>; 3],
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(r: GrayImage<T>, g: GrayImage<T>, b: GrayImage<T>) -> Result<Self> {
        if r.height != g.height || r.height != b.height || r.width != g.width || r.width != b.width {
            return Err(ImgError::Dimensions("channel sizes differ".into()));
        }
        Ok(Self {
            channels: [r, g, b],
        })
    }

    pub fn from_gray(g: &GrayImage<T>) -> Self {
        Self {
            channels: [g.clone(), g.clone(), g.clone()],
        }
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> GrayImage<T> {
        let [r, g, b] = &self.channels;
        GrayImage {
            height: r.height,
            width: r.width,
            data: r
                .data
                .iter()
                .zip(&g.data)
                .zip(&b.data)
                .map(|((&r, &g), &b)| {
                    clamp255(T::lit(0.299) * r + T::lit(0.587) * g + T::lit(0.114) * b)
                })
                .collect(),
        }
    }

    pub fn map_channels(&self, f: impl Fn(&GrayImage<T>) -> Result<GrayImage<T>>) -> Result<Self> {
        let [r, g, b] = &self.channels;
        Self::new(f(r)?, f(g)?, f(b)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let planes: Vec<Vec<u8>> = self.channels.iter().map(|c| c.to_u8()).collect();
        let mut raw = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            raw.extend(planes.iter().map(|p| p[i]));
        }
        let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| ImgError::Dimensions("buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.as_raw();
        let plane = |c: usize| -> Result<GrayImage<T>> {
            let bytes: Vec<u8> = (0..h * w).map(|i| raw[i * 3 + c]).collect();
            GrayImage::from_u8(h, w, &bytes)
        };
        Self::new(plane(0)?, plane(1)?, plane(2)?)
    }
}

/// Binary `H×W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(ImgError::Dimensions(format!(
                "mask {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| ImgError::Dimensions("buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Nonzero pixels become 1.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.as_raw().iter().map(|&v| v > 127).collect())
    }
}

#[inline]
pub(crate) fn clamp255<T: Scalar>(v: T) -> T {
    if v.is_nan() {
        return T::zero();
    }
    v.max(T::zero()).min(T::lit(255.0))
}
