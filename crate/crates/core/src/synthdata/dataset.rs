use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::Planes;
use super::manifest::{read_manifest, ManifestRecord, Split, MANIFEST_FILE};
use super::{DataError, Result};
use crate::imgproc::{
    harris_mask, preprocess_optical, preprocess_sar, sobel_mask, BinaryMask, GrayImage, HarrisParams,
    PreprocessConfig, RgbImage,
};
use crate::model::Modality;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Run the modality preprocessing chains at load time.
    pub preprocess: bool,
    pub preprocessing: PreprocessConfig,
    /// Derive pseudo-labels from the preprocessed rather than raw images.
    pub pseudo_on_preprocessed: bool,
    pub sobel_quantile: f64,
    pub harris: HarrisParams,
    /// Loader threads; 0 uses every core.
    pub threads: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preprocess: true,
            preprocessing: PreprocessConfig::default(),
            pseudo_on_preprocessed: true,
            sobel_quantile: 0.85,
            harris: HarrisParams::default(),
            threads: 0,
        }
    }
}

/// One loaded image: what the network sees plus its pseudo-label mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: ManifestRecord,
    /// 3 planes for optical, 1 for SAR.
    pub image: Planes,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

fn rgb_planes(img: &RgbImage<f64>) -> Planes {
    Planes {
        channels: 3,
        height: img.height(),
        width: img.width(),
        data: img.channels.iter().flat_map(|c| c.data().iter().copied()).collect(),
    }
}

fn gray_planes(img: &GrayImage<f64>) -> Planes {
    Planes {
        channels: 1,
        height: img.height(),
        width: img.width(),
        data: img.data().to_vec(),
    }
}

fn load_sample(root: &Path, rec: &ManifestRecord, cfg: &DataConfig) -> Result<Sample> {
    let path = root.join(&rec.path);
    let (image, mask) = match rec.modality {
        Modality::Opt => {
            let raw = RgbImage::<f64>::load_png(&path)?;
            let pre = if cfg.preprocess {
                preprocess_optical(&raw, &cfg.preprocessing)?
            } else {
                raw.clone()
            };
            let src = if cfg.pseudo_on_preprocessed { &pre } else { &raw };
            (rgb_planes(&pre), sobel_mask(&src.luma(), cfg.sobel_quantile)?)
        }
        Modality::Sar => {
            let raw = GrayImage::<f64>::load_png(&path)?;
            let pre = if cfg.preprocess {
                preprocess_sar(&raw, &cfg.preprocessing)?
            } else {
                raw.clone()
            };
            let src = if cfg.pseudo_on_preprocessed { &pre } else { &raw };
            (gray_planes(&pre), harris_mask(src, &cfg.harris)?)
        }
    };
    if image.height != rec.height || image.width != rec.width {
        return Err(DataError::Config(format!(
            "{}: image {}x{} but manifest says {}x{}",
            rec.id, image.height, image.width, rec.height, rec.width
        )));
    }
    Ok(Sample {
        record: rec.clone(),
        image,
        mask,
    })
}

impl Dataset {
    /// Loads `<root>/manifest.jsonl` and every image it lists.
    pub fn load(root: &Path, cfg: &DataConfig) -> Result<Self> {
        let records = read_manifest(&root.join(MANIFEST_FILE))?;
        Self::from_records(root, records, cfg)
    }

    /// Loads images in parallel; output order follows `records`.
    pub fn from_records(root: &Path, records: Vec<ManifestRecord>, cfg: &DataConfig) -> Result<Self> {
        check_closed_set(&records)?;
        let workers = super::worker_count(cfg.threads);
        let chunk = records.len().div_ceil(workers).max(1);
        let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| load_sample(root, r, cfg)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("loader worker panicked"))
                .collect()
        });
        let mut samples = Vec::with_capacity(records.len());
        for p in parts {
            samples.extend(p?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples in `split`, optionally one modality only.
    pub fn indices(&self, split: Split, modality: Option<Modality>) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| {
                let r = &self.samples[i].record;
                r.split == split && modality.is_none_or(|m| r.modality == m)
            })
            .collect()
    }

    pub fn num_labels(&self) -> usize {
        self.samples.iter().map(|s| s.record.label + 1).max().unwrap_or(0)
    }
}

/// Query and gallery labels must all appear in training.
fn check_closed_set(records: &[ManifestRecord]) -> Result<()> {
    let train: std::collections::HashSet<usize> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.label)
        .collect();
    if let Some(r) = records
        .iter()
        .find(|r| r.split != Split::Train && !train.contains(&r.label))
    {
        return Err(DataError::Config(format!(
            "{} has label {} absent from training",
            r.id, r.label
        )));
    }
    Ok(())
}

/// Maps `[0,255]` to roughly unit scale.
pub fn normalize(v: f64) -> f64 {
    (v / 255.0 - 0.5) / 0.25
}

/// Stacks images into `[N, channels, H, W]`, replicating single-plane
/// images across channels.
pub fn images_tensor<T: Scalar>(images: &[&Planes], channels: usize) -> Tensor<T> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for img in images {
        for c in 0..channels {
            let src = img.plane(if img.channels == 1 { 0 } else { c });
            data.extend(src.iter().map(|&v| T::lit(normalize(v))));
        }
    }
    Tensor::new(vec![images.len(), channels, h, w], data).expect("consistent image sizes")
}

/// Geometric prior `[N, 2, H, W]`: normalized SAR intensity and its mask.
pub fn geo_tensor<T: Scalar>(items: &[(&Planes, &BinaryMask)]) -> Tensor<T> {
    let (h, w) = (items[0].0.height, items[0].0.width);
    let mut data = Vec::with_capacity(items.len() * 2 * h * w);
    for (img, mask) in items {
        data.extend(img.plane(0).iter().map(|&v| T::lit(normalize(v))));
        data.extend(mask.data().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![items.len(), 2, h, w], data).expect("consistent image sizes")
}
