use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_optical, render_sar, ObjectSpec, OpticalStyle, SarStyle, NUM_CATEGORIES};
use super::{io_err, DataError, Result};
use crate::model::Modality;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub modality: Modality,
    pub label: usize,
    pub split: Split,
    pub width: usize,
    pub height: usize,
}

/// Total images per split, both modalities together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 800,
            query: 100,
            gallery: 300,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Query => self.query,
            Split::Gallery => self.gallery,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub categories: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub optical: OpticalStyle,
    pub sar: SarStyle,
    /// Render threads; 0 uses every core.
    pub threads: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            categories: NUM_CATEGORIES,
            counts: SplitCounts::default(),
            seed: 0,
            optical: OpticalStyle::default(),
            sar: SarStyle::default(),
            threads: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(DataError::Config(format!("image_size {} < 16", self.image_size)));
        }
        if self.categories == 0 || self.categories > NUM_CATEGORIES {
            return Err(DataError::Config(format!(
                "categories {} not in 1..={NUM_CATEGORIES}",
                self.categories
            )));
        }
        Ok(())
    }

    /// Stratified plan: every `(split, label, modality)` cell with its count.
    /// Cell targets are `count / (categories·2)`; the remainder goes one
    /// each to the first cells in `(label, modality)` order.
    pub fn plan(&self) -> Vec<(Split, usize, Modality, usize)> {
        let cells = self.categories * 2;
        let mut out = Vec::new();
        for split in Split::ALL {
            let n = self.counts.get(split);
            let (base, rem) = (n / cells, n % cells);
            for label in 0..self.categories {
                for (mi, m) in [Modality::Opt, Modality::Sar].into_iter().enumerate() {
                    let cell = label * 2 + mi;
                    out.push((split, label, m, base + usize::from(cell < rem)));
                }
            }
        }
        out
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-sample stream derived from `(seed, id)`, independent of order.
pub fn sample_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(id));
    rng
}

fn render_one(cfg: &SynthConfig, root: &Path, rec: &ManifestRecord) -> Result<()> {
    let mut rng = sample_rng(cfg.seed, &rec.id);
    let spec = ObjectSpec::sample(rec.label, &mut rng);
    let path = root.join(&rec.path);
    match rec.modality {
        Modality::Opt => render_optical(&spec, cfg.image_size, &cfg.optical, &mut rng).0.save_png(&path)?,
        Modality::Sar => render_sar(&spec, cfg.image_size, &cfg.sar, &mut rng).0.save_png(&path)?,
    }
    Ok(())
}

/// Renders the stratified dataset under `root` and writes the manifest.
/// Refuses to run if a manifest already exists there.
pub fn build_manifest(cfg: &SynthConfig, root: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() {
        return Err(DataError::Exists(manifest_path.display().to_string()));
    }
    let mut records = Vec::new();
    for (split, label, m, n) in cfg.plan() {
        let dir = PathBuf::from(split.as_str()).join(m.as_str()).join(label.to_string());
        fs::create_dir_all(root.join(&dir)).map_err(io_err(&root.join(&dir)))?;
        for k in 0..n {
            let id = format!("{split}-{m}-{label}-{k:05}");
            records.push(ManifestRecord {
                path: dir.join(format!("{id}.png")),
                id,
                modality: m,
                label,
                split,
                width: cfg.image_size,
                height: cfg.image_size,
            });
        }
    }
    let workers = super::worker_count(cfg.threads);
    let chunk = records.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().try_for_each(|r| render_one(cfg, root, r))))
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("render worker panicked"))
    })?;
    write_manifest(&manifest_path, &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a JSON-lines manifest; rejects duplicate ids or paths.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out: Vec<ManifestRecord> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    let mut paths = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) || !paths.insert(rec.path.clone()) {
            return Err(DataError::Manifest {
                line: i + 1,
                msg: format!("duplicate entry {}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
