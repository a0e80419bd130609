//! Procedural unaligned optical/SAR fine-grained dataset: rendering,
//! manifest/split machinery, augmentation and loading.

mod augment;
mod dataset;
mod manifest;
mod render;

pub use augment::{augment, erase_rect, AugmentConfig, Planes};
pub use dataset::{geo_tensor, images_tensor, normalize, DataConfig, Dataset, Sample};
pub use manifest::{
    build_manifest, read_manifest, sample_rng, write_manifest, ManifestRecord, Split, SplitCounts,
    SynthConfig, MANIFEST_FILE,
};
pub use render::{
    coverage, render_optical, render_sar, ObjectSpec, OpticalStyle, Pose, PoseJitter, SarStyle,
    NUM_CATEGORIES,
};

use thiserror::Error;

use crate::imgproc::ImgError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImgError),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("refusing to overwrite existing {0}")]
    Exists(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Worker threads for `requested` (0 means one per core).
pub(crate) fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[cfg(test)]
mod tests;
