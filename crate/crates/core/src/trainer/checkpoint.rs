use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{io_err, Result, RunConfig, TrainError};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GMCKPT01";
const VERSION: u32 = 1;

/// Named arrays as stored on disk. Running statistics appear as
/// `<name>.running_mean` / `<name>.running_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_store(config: &RunConfig, step: u64, store: &ParamStore<f64>) -> Self {
        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
            .collect();
        for b in store.buffers() {
            arrays.push((format!("{}.running_mean", b.name), vec![b.mean.len()], b.mean.clone()));
            arrays.push((format!("{}.running_var", b.name), vec![b.var.len()], b.var.clone()));
        }
        Self {
            config: config.clone(),
            step,
            arrays,
        }
    }

    /// Writes values into `store` by name; every parameter and buffer must
    /// be present with a matching shape.
    pub fn apply(&self, store: &mut ParamStore<f64>) -> Result<()> {
        let find = |name: &str| self.arrays.iter().find(|(n, _, _)| n == name);
        let missing = |name: &str| TrainError::Checkpoint(format!("missing array {name}"));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let (_, shape, data) = find(&name).ok_or_else(|| missing(&name))?;
            let p = store.get_mut(id);
            if p.value.shape() != shape.as_slice() {
                return Err(TrainError::Checkpoint(format!(
                    "{name}: shape {shape:?}, expected {:?}",
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(shape.clone(), data.clone())?;
        }
        for b in store.buffers_mut() {
            for (suffix, dst) in [("running_mean", &mut b.mean), ("running_var", &mut b.var)] {
                let key = format!("{}.{suffix}", b.name);
                let (_, _, data) = find(&key).ok_or_else(|| missing(&key))?;
                if data.len() != dst.len() {
                    return Err(TrainError::Checkpoint(format!("{key}: length {}", data.len())));
                }
                dst.copy_from_slice(data);
            }
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Layout: magic, u32 version, u64 step, u64-length-prefixed config JSON,
/// u64 array count, then per array: u64-prefixed name, u64 rank, u64 dims,
/// f64 values, all little-endian.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, ck.step);
    let json = serde_json::to_vec(&ck.config).expect("config serializes");
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u64(&mut out, ck.arrays.len() as u64);
    for (name, shape, data) in &ck.arrays {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, shape.len() as u64);
        for &d in shape {
            put_u64(&mut out, d as u64);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let out = encode_checkpoint(ck);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| TrainError::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64()?;
    let n = r.len()?;
    let config: RunConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| TrainError::Checkpoint(format!("config: {e}")))?;
    let count = r.len()?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("name not utf-8".into()))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| TrainError::Checkpoint("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, shape, data));
    }
    if r.pos != buf.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { config, step, arrays })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}
