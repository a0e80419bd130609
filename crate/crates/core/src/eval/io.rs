use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EmbeddingSet, Metrics, RankedList, Role};
use crate::model::Modality;

const MAGIC: &[u8; 8] = b"GMEMB001";

#[derive(Debug, Error)]
pub enum EvalIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed embedding file: {0}")]
    Format(String),
}

/// One line of the embedding sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub id: String,
    pub label: usize,
    pub modality: Modality,
    pub role: Role,
}

/// Writes `<stem>.bin` (magic, rows u64, cols u64, row-major f64, little
/// endian) and `<stem>.jsonl` (one [`SidecarRecord`] per row).
pub fn write_embeddings(set: &EmbeddingSet<f64>, stem: &Path) -> Result<(), EvalIoError> {
    let mut bin = BufWriter::new(File::create(stem.with_extension("bin"))?);
    bin.write_all(MAGIC)?;
    bin.write_all(&(set.len() as u64).to_le_bytes())?;
    bin.write_all(&(set.dim as u64).to_le_bytes())?;
    for v in &set.features {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;
    let mut side = BufWriter::new(File::create(stem.with_extension("jsonl"))?);
    for i in 0..set.len() {
        let rec = SidecarRecord {
            id: set.ids[i].clone(),
            label: set.labels[i],
            modality: set.modality[i],
            role: set.roles[i],
        };
        serde_json::to_writer(&mut side, &rec)?;
        side.write_all(b"\n")?;
    }
    side.flush()?;
    Ok(())
}

pub fn read_embeddings(stem: &Path) -> Result<EmbeddingSet<f64>, EvalIoError> {
    let mut bin = BufReader::new(File::open(stem.with_extension("bin"))?);
    let mut magic = [0u8; 8];
    bin.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EvalIoError::Format("bad magic".into()));
    }
    let mut word = [0u8; 8];
    bin.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    bin.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let mut features = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        bin.read_exact(&mut word)?;
        features.push(f64::from_le_bytes(word));
    }
    if bin.read(&mut word)? != 0 {
        return Err(EvalIoError::Format("trailing bytes".into()));
    }
    let side = BufReader::new(File::open(stem.with_extension("jsonl"))?);
    let mut recs = Vec::new();
    for line in side.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            recs.push(serde_json::from_str::<SidecarRecord>(&line)?);
        }
    }
    if recs.len() != rows {
        return Err(EvalIoError::Format(format!("{rows} rows but {} sidecar records", recs.len())));
    }
    EmbeddingSet::new(
        cols,
        features,
        recs.iter().map(|r| r.label).collect(),
        recs.iter().map(|r| r.modality).collect(),
        recs.iter().map(|r| r.role).collect(),
        recs.into_iter().map(|r| r.id).collect(),
    )
    .map_err(EvalIoError::Format)
}

pub fn write_metrics_json(metrics: &[Metrics], path: &Path) -> Result<(), EvalIoError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, metrics)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<Metrics>, EvalIoError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_metrics_csv(metrics: &[Metrics], path: &Path) -> Result<(), EvalIoError> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "protocol,map,rank1,rank3,rank5,queries,excluded,random_map")?;
    for m in metrics {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            m.protocol.name(),
            m.map,
            m.rank1,
            m.rank3,
            m.rank5,
            m.queries,
            m.excluded,
            m.random_map
        )?;
    }
    f.flush()?;
    Ok(())
}

/// One JSON object per query.
pub fn write_ranked_lists(lists: &[RankedList], path: &Path) -> Result<(), EvalIoError> {
    let mut f = BufWriter::new(File::create(path)?);
    for l in lists {
        serde_json::to_writer(&mut f, l)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
