//! Classical image operators: preprocessing chains and the Sobel/Harris
//! pseudo-label generators used for geometric supervision.

mod filters;
mod image;
mod pseudo;

pub use filters::{
    bilateral_filter, clahe, clahe_tiles, laplacian_sharpen, median_filter, preprocess_optical,
    preprocess_sar, threshold_suppress, ClaheTiles, PreprocessConfig,
};
pub use image::{BinaryMask, GrayImage, RgbImage};
pub use pseudo::{
    downsample_mask, harris_mask, harris_response, quantile, sobel_gradients, sobel_magnitude,
    sobel_mask, HarrisParams,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("{op}: image {height}x{width} smaller than {min}x{min}")]
    TooSmall {
        op: String,
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("mask {height}x{width} not divisible by factor {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("bad dimensions: {0}")]
    Dimensions(String),
    #[error("image io: {0}")]
    Io(#[from] ::image::ImageError),
}

pub type Result<T> = std::result::Result<T, ImgError>;
