use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::{encode_checkpoint, sha256_hex, Checkpoint};
use super::optim::lr_at;
use super::sampler::PkPool;
use super::step::{StepRecord, Trainer};
use super::{io_err, Result, RunConfig, TrainError};
use crate::eval::{self as eval_io, evaluate, EmbeddingSet, EvalOptions, Metrics, Protocol, Role};
use crate::imgproc::BinaryMask;
use crate::model::{GeoMamba, Modality, ParamStore};
use crate::synthdata::{geo_tensor, images_tensor, Dataset, Planes, Split};

/// λ_GCC values of the sensitivity sweep.
pub const DEFAULT_SWEEP: [f64; 5] = [1.0, 5.0, 10.0, 15.0, 20.0];

const EMBED_CHUNK: usize = 32;

/// Eval-mode embeddings of one split, in dataset order.
pub fn embed_split(model: &GeoMamba, store: &ParamStore<f64>, ds: &Dataset, split: Split, role: Role) -> Result<EmbeddingSet<f64>> {
    let idx = ds.indices(split, None);
    let dim = model.cfg.embed_dim;
    let mut features = vec![0.0; idx.len() * dim];
    let geo_on = !model.cfg.gfi_stages().is_empty();
    for m in [Modality::Opt, Modality::Sar] {
        let rows: Vec<usize> = (0..idx.len()).filter(|&r| ds.samples[idx[r]].record.modality == m).collect();
        for chunk in rows.chunks(EMBED_CHUNK) {
            let samples: Vec<_> = chunk.iter().map(|&r| &ds.samples[idx[r]]).collect();
            let imgs: Vec<&Planes> = samples.iter().map(|s| &s.image).collect();
            let geo = (m == Modality::Sar && geo_on).then(|| {
                let items: Vec<(&Planes, &BinaryMask)> = samples.iter().map(|s| (&s.image, &s.mask)).collect();
                geo_tensor::<f64>(&items)
            });
            let emb = model.embed(store, images_tensor::<f64>(&imgs, model.cfg.in_channels), m, geo)?;
            for (j, &r) in chunk.iter().enumerate() {
                features[r * dim..(r + 1) * dim].copy_from_slice(&emb.data()[j * dim..(j + 1) * dim]);
            }
        }
    }
    let recs: Vec<_> = idx.iter().map(|&i| &ds.samples[i].record).collect();
    EmbeddingSet::new(
        dim,
        features,
        recs.iter().map(|r| r.label).collect(),
        recs.iter().map(|r| r.modality).collect(),
        vec![role; recs.len()],
        recs.iter().map(|r| r.id.clone()).collect(),
    )
    .map_err(TrainError::Eval)
}

/// Query/gallery embeddings and metrics under every protocol.
pub fn evaluate_run(
    model: &GeoMamba,
    store: &ParamStore<f64>,
    ds: &Dataset,
    block: usize,
) -> Result<(Vec<Metrics>, EmbeddingSet<f64>, EmbeddingSet<f64>)> {
    let q = embed_split(model, store, ds, Split::Query, Role::Query)?;
    let g = embed_split(model, store, ds, Split::Gallery, Role::Gallery)?;
    let metrics = Protocol::ALL
        .iter()
        .map(|&p| evaluate(&q, &g, p, EvalOptions { block }).map_err(TrainError::Eval))
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics, q, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_loss: f64,
    /// Largest `|total − (id + λ_tri·tri + λ_GCC·gcc)|` over all steps.
    pub max_residual: f64,
    pub checkpoint_sha256: String,
    pub metrics: Vec<Metrics>,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

impl RunSummary {
    pub fn metric(&self, p: Protocol) -> &Metrics {
        self.metrics.iter().find(|m| m.protocol == p).expect("all protocols evaluated")
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty {
            return Err(TrainError::Exists(out.display().to_string()));
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Trains on the dataset's train split and evaluates query against
/// gallery. With `out` set, writes `config.toml`, `metrics.csv` (per
/// step), checkpoints, `eval.json`/`eval.csv` and the embedding export.
pub fn train_run(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let pool = PkPool::from_dataset(ds, Split::Train);
    let per_mod = pool
        .by_label
        .values()
        .map(|(o, s)| o.len().min(s.len()))
        .sum::<usize>();
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| per_mod.div_ceil(cfg.p * cfg.k).max(1));
    let total = steps_per_epoch * cfg.epochs;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut csv = out
        .map(|d| -> Result<_> {
            let path = d.join("metrics.csv");
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            writeln!(f, "{}", StepRecord::CSV_HEADER).map_err(io_err(&path))?;
            Ok((f, path))
        })
        .transpose()?;
    let mut records = Vec::with_capacity(total);
    let mut max_residual = 0.0f64;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let lr = lr_at(trainer.step, total, cfg.lr, cfg.warmup_frac);
            let batch = trainer.sample_batch(&pool)?;
            let rec = trainer.train_step(ds, &batch, lr, epoch)?;
            max_residual = max_residual.max(rec.breakdown().residual(&cfg.loss).abs());
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", rec.csv_row()).map_err(io_err(path))?;
            }
            records.push(rec);
        }
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            let ck = Checkpoint::from_store(cfg, trainer.step as u64, &trainer.store);
            let path = dir.join(format!("checkpoint_epoch{:03}.gmc", epoch + 1));
            write_bytes(&path, &encode_checkpoint(&ck))?;
        }
    }
    if let Some((mut f, path)) = csv {
        f.flush().map_err(io_err(&path))?;
    }
    let bytes = encode_checkpoint(&Checkpoint::from_store(cfg, trainer.step as u64, &trainer.store));
    let (metrics, q, g) = evaluate_run(&trainer.model, &trainer.store, ds, cfg.eval_block)?;
    if let Some(dir) = out {
        write_bytes(&dir.join("checkpoint.gmc"), &bytes)?;
        let eval_err = |e: eval_io::EvalIoError| TrainError::Eval(e.to_string());
        eval_io::write_metrics_json(&metrics, &dir.join("eval.json")).map_err(eval_err)?;
        eval_io::write_metrics_csv(&metrics, &dir.join("eval.csv")).map_err(eval_err)?;
        let emb = dir.join("embeddings");
        fs::create_dir_all(&emb).map_err(io_err(&emb))?;
        eval_io::write_embeddings(&q, &emb.join("query")).map_err(eval_err)?;
        eval_io::write_embeddings(&g, &emb.join("gallery")).map_err(eval_err)?;
    }
    Ok(RunSummary {
        steps: records.len(),
        final_loss: records.last().map_or(f64::NAN, |r| r.total),
        max_residual,
        checkpoint_sha256: sha256_hex(&bytes),
        metrics,
        records,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Ablation variants: injection and geometric supervision on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Gfi,
    Gcc,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Gfi, Variant::Gcc, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Gfi => "gfi",
            Variant::Gcc => "gcc",
            Variant::Full => "full",
        }
    }

    pub fn uses_gfi(self) -> bool {
        matches!(self, Variant::Gfi | Variant::Full)
    }

    pub fn uses_gcc(self) -> bool {
        matches!(self, Variant::Gcc | Variant::Full)
    }

    /// `cfg` with the variant's switches applied; GCC keeps the configured
    /// weight when on.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.gfi_enabled = self.uses_gfi();
        if !self.uses_gcc() {
            c.loss.lambda_gcc = 0.0;
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant '{s}'"))
    }
}

/// Metrics of one trained configuration under one protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Variant name, or `lambda=<v>` for sweep rows.
    pub name: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub lambda_gcc: f64,
    pub map: f64,
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
    pub random_map: f64,
    pub checkpoint_sha256: String,
}

impl AblationRow {
    fn new(name: String, cfg: &RunConfig, s: &RunSummary, protocol: Protocol) -> Self {
        let m = s.metric(protocol);
        Self {
            name,
            seed: cfg.seed,
            protocol,
            lambda_gcc: cfg.loss.lambda_gcc,
            map: m.map,
            rank1: m.rank1,
            rank3: m.rank3,
            rank5: m.rank5,
            random_map: m.random_map,
            checkpoint_sha256: s.checkpoint_sha256.clone(),
        }
    }
}

/// CSV text of ablation or sweep rows.
pub fn ablation_rows(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,seed,protocol,lambda_gcc,map,rank1,rank3,rank5,random_map,checkpoint_sha256\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.name,
            r.seed,
            r.protocol.name(),
            r.lambda_gcc, r.map,
            r.rank1,
            r.rank3,
            r.rank5,
            r.random_map,
            r.checkpoint_sha256
        ));
    }
    s
}

fn sub_dir(out: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    out.map(|d| d.join(name))
}

/// Every variant under every seed, variants outermost. Writes
/// `ablation.csv` plus one run directory per row when `out` is set.
pub fn run_ablation(
    cfg: &RunConfig,
    ds: &Dataset,
    seeds: &[u64],
    protocol: Protocol,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if let Some(d) = out {
        prepare_dir(d)?;
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        for &seed in seeds {
            let c = RunConfig { seed, ..v.apply(cfg) };
            let dir = sub_dir(out, &format!("{}_seed{seed}", v.name()));
            let s = train_run(&c, ds, dir.as_deref())?;
            rows.push(AblationRow::new(v.name().into(), &c, &s, protocol));
        }
    }
    if let Some(d) = out {
        write_text(&d.join("ablation.csv"), &ablation_rows(&rows))?;
    }
    Ok(rows)
}

/// One full-model run per λ_GCC value. Writes `sweep.csv` when `out` is set.
pub fn run_sweep(
    cfg: &RunConfig,
    ds: &Dataset,
    values: &[f64],
    protocol: Protocol,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if let Some(d) = out {
        prepare_dir(d)?;
    }
    let mut rows = Vec::new();
    for &lambda in values {
        let mut c = cfg.clone();
        c.model.gfi_enabled = true;
        c.loss.lambda_gcc = lambda;
        let dir = sub_dir(out, &format!("lambda_{lambda}"));
        let s = train_run(&c, ds, dir.as_deref())?;
        rows.push(AblationRow::new(format!("lambda={lambda}"), &c, &s, protocol));
    }
    if let Some(d) = out {
        write_text(&d.join("sweep.csv"), &ablation_rows(&rows))?;
    }
    Ok(rows)
}
