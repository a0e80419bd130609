use std::fs;
use std::path::Path;

use geomamba::eval::{self, evaluate, ranked_lists, EmbeddingSet, EvalOptions, Metrics, Protocol, Role};
use geomamba::imgproc::{GrayImage, RgbImage};
use geomamba::model::{GeoMamba, Modality};
use geomamba::synthdata::{build_manifest, write_manifest, Dataset, Planes, Split, MANIFEST_FILE};
use geomamba::trainer::{
    embed_split, load_checkpoint, run_ablation, run_sweep, train_run, AblationRow, Variant,
};
use geomamba::verify::{corrupted_backward_error, full_report, OP_TOL};

use crate::svg::{bar_chart, line_chart, Series};
use crate::{CliConfig, CliError, Command};

pub(crate) fn dispatch(cmd: &Command, cfg: &CliConfig) -> Result<(), CliError> {
    match cmd {
        Command::Synth => synth(cfg),
        Command::Preprocess => preprocess(cfg),
        Command::Train => train(cfg),
        Command::Eval {
            checkpoint,
            embeddings,
            top_k,
        } => eval_cmd(cfg, checkpoint.as_deref(), embeddings.as_deref(), *top_k),
        Command::Ablate { seeds } => ablate(cfg, seeds.as_deref().unwrap_or(&cfg.seeds)),
        Command::SweepLambda { values } => sweep(cfg, values.as_deref().unwrap_or(&cfg.lambdas)),
        Command::Gradcheck => gradcheck(cfg),
        Command::ExportEmbeddings { checkpoint } => export(cfg, checkpoint),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn eval_io(e: eval::EvalIoError) -> CliError {
    CliError::Io(e.to_string())
}

/// Creates `dir`, refusing one that already has contents.
fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && fs::read_dir(dir).map_err(io(dir))?.next().is_some() {
        return Err(CliError::Io(format!(
            "refusing to overwrite non-empty directory {}",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

fn load_data(cfg: &CliConfig) -> Result<Dataset, CliError> {
    Ok(Dataset::load(cfg.data_dir()?, &cfg.run.data)?)
}

fn print_metrics(metrics: &[Metrics], cfg: &CliConfig) {
    println!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>10}", "protocol", "mAP", "rank1", "rank3", "rank5", "random");
    for p in cfg.protocols() {
        if let Some(m) = metrics.iter().find(|m| m.protocol == p) {
            println!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
                p.name(),
                m.map,
                m.rank1,
                m.rank3,
                m.rank5,
                m.random_map
            );
        }
    }
}

fn synth(cfg: &CliConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let records = build_manifest(&cfg.synth, out)?;
    println!("wrote {} images and {}", records.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn planes_to_rgb(p: &Planes) -> Result<RgbImage<f64>, CliError> {
    let plane = |c: usize| GrayImage::new(p.height, p.width, p.plane(c).to_vec());
    let err = |e: geomamba::imgproc::ImgError| CliError::Numerical(e.to_string());
    RgbImage::new(plane(0).map_err(err)?, plane(1).map_err(err)?, plane(2).map_err(err)?).map_err(err)
}

fn preprocess(cfg: &CliConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let ds = load_data(cfg)?;
    fresh_dir(out)?;
    let img_err = |e: geomamba::imgproc::ImgError| CliError::Io(e.to_string());
    for s in &ds.samples {
        let path = out.join(&s.record.path);
        let mask_path = out.join("masks").join(&s.record.path);
        for p in [&path, &mask_path] {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
        }
        match s.record.modality {
            Modality::Opt => planes_to_rgb(&s.image)?.save_png(&path).map_err(img_err)?,
            Modality::Sar => GrayImage::new(s.image.height, s.image.width, s.image.plane(0).to_vec())
                .map_err(img_err)?
                .save_png(&path)
                .map_err(img_err)?,
        }
        s.mask.save_png(&mask_path).map_err(img_err)?;
    }
    let records: Vec<_> = ds.samples.iter().map(|s| s.record.clone()).collect();
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    println!("wrote {} preprocessed images and masks to {}", records.len(), out.display());
    Ok(())
}

fn train(cfg: &CliConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let ds = load_data(cfg)?;
    let summary = train_run(&cfg.run, &ds, Some(out))?;
    println!(
        "{} steps, final loss {:.4}, checkpoint sha256 {}",
        summary.steps, summary.final_loss, summary.checkpoint_sha256
    );
    print_metrics(&summary.metrics, cfg);
    Ok(())
}

/// Query and gallery embeddings of a checkpoint on the configured data.
fn checkpoint_embeddings(cfg: &CliConfig, path: &Path) -> Result<(EmbeddingSet<f64>, EmbeddingSet<f64>), CliError> {
    let ck = load_checkpoint(path)?;
    let ds = load_data(cfg)?;
    let (model, mut store) = GeoMamba::new::<f64>(ck.config.model_config(), ck.config.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    ck.apply(&mut store)?;
    let q = embed_split(&model, &store, &ds, Split::Query, Role::Query)?;
    let g = embed_split(&model, &store, &ds, Split::Gallery, Role::Gallery)?;
    Ok((q, g))
}

fn eval_cmd(cfg: &CliConfig, checkpoint: Option<&Path>, embeddings: Option<&Path>, top_k: usize) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let (q, g) = match (checkpoint, embeddings) {
        (Some(ck), None) => checkpoint_embeddings(cfg, ck)?,
        (None, Some(dir)) => (
            eval::read_embeddings(&dir.join("query")).map_err(eval_io)?,
            eval::read_embeddings(&dir.join("gallery")).map_err(eval_io)?,
        ),
        _ => return Err(CliError::Usage("eval needs exactly one of --checkpoint or --embeddings".into())),
    };
    fresh_dir(out)?;
    let mut metrics = Vec::new();
    for p in cfg.protocols() {
        metrics.push(evaluate(&q, &g, p, EvalOptions { block: cfg.run.eval_block }).map_err(CliError::Usage)?);
        let path = out.join(format!("ranked_{}.jsonl", p.name()));
        eval::write_ranked_lists(&ranked_lists(&q, &g, p, top_k), &path).map_err(eval_io)?;
    }
    eval::write_metrics_json(&metrics, &out.join("eval.json")).map_err(eval_io)?;
    eval::write_metrics_csv(&metrics, &out.join("eval.csv")).map_err(eval_io)?;
    print_metrics(&metrics, cfg);
    Ok(())
}

fn export(cfg: &CliConfig, checkpoint: &Path) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let (q, g) = checkpoint_embeddings(cfg, checkpoint)?;
    fresh_dir(out)?;
    eval::write_embeddings(&q, &out.join("query")).map_err(eval_io)?;
    eval::write_embeddings(&g, &out.join("gallery")).map_err(eval_io)?;
    println!("wrote {} query and {} gallery embeddings to {}", q.len(), g.len(), out.display());
    Ok(())
}

fn report_protocol(cfg: &CliConfig) -> Protocol {
    cfg.protocol.unwrap_or(Protocol::AllToAll)
}

fn print_rows(rows: &[AblationRow]) {
    println!("{:<12} {:>5} {:>8} {:>8} {:>8} {:>8}", "name", "seed", "mAP", "rank1", "rank5", "random");
    for r in rows {
        println!(
            "{:<12} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.name, r.seed, r.map, r.rank1, r.rank5, r.random_map
        );
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn ablate(cfg: &CliConfig, seeds: &[u64]) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    let out = cfg.out_dir()?;
    let ds = load_data(cfg)?;
    let protocol = report_protocol(cfg);
    let rows = run_ablation(&cfg.run, &ds, seeds, protocol, Some(out))?;
    print_rows(&rows);
    let bars: Vec<(String, f64)> = Variant::ALL
        .iter()
        .map(|v| (v.name().to_string(), mean(rows.iter().filter(|r| r.name == v.name()).map(|r| r.map))))
        .collect();
    let chance = mean(rows.iter().map(|r| r.random_map));
    let title = format!("mean mAP over {} seeds ({})", seeds.len(), protocol.name());
    let path = out.join("ablation.svg");
    fs::write(&path, bar_chart(&title, &bars, Some(chance))).map_err(io(&path))?;
    Ok(())
}

fn sweep(cfg: &CliConfig, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep-lambda needs at least one value".into()));
    }
    let out = cfg.out_dir()?;
    let ds = load_data(cfg)?;
    let protocol = report_protocol(cfg);
    let rows = run_sweep(&cfg.run, &ds, values, protocol, Some(out))?;
    print_rows(&rows);
    let series = |name: &str, f: fn(&AblationRow) -> f64| Series {
        name: name.to_string(),
        points: rows.iter().map(|r| (r.lambda_gcc, f(r))).collect(),
    };
    let chart = line_chart(
        &format!("sensitivity to lambda_gcc ({})", protocol.name()),
        "lambda_gcc",
        &[series("mAP", |r| r.map), series("rank1", |r| r.rank1), series("rank5", |r| r.rank5)],
    );
    let path = out.join("sweep.svg");
    fs::write(&path, chart).map_err(io(&path))?;
    Ok(())
}

fn gradcheck(cfg: &CliConfig) -> Result<(), CliError> {
    let num = |e: geomamba::tensor::TensorError| CliError::Numerical(e.to_string());
    let lines = full_report(cfg.run.seed).map_err(num)?;
    let mut csv = String::from("check,max_rel_error,tolerance,passed\n");
    println!("{:<40} {:>12} {:>10}  result", "check", "max rel err", "tol");
    for l in &lines {
        let verdict = if l.passed() { "pass" } else { "FAIL" };
        println!("{:<40} {:>12.3e} {:>10.0e}  {verdict}", l.name, l.max_rel_error, l.tolerance);
        csv.push_str(&format!("{},{:e},{:e},{}\n", l.name, l.max_rel_error, l.tolerance, l.passed()));
    }
    let control = corrupted_backward_error(cfg.run.seed).map_err(num)?;
    let caught = control >= OP_TOL;
    println!(
        "{:<40} {:>12.3e} {:>10.0e}  {}",
        "control:corrupted_backward",
        control,
        OP_TOL,
        if caught { "detected" } else { "MISSED" }
    );
    csv.push_str(&format!("control:corrupted_backward,{control:e},{OP_TOL:e},{caught}\n"));
    if let Some(out) = &cfg.out {
        fresh_dir(out)?;
        let path = out.join("gradcheck.csv");
        fs::write(&path, csv).map_err(io(&path))?;
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 || !caught {
        return Err(CliError::Numerical(format!(
            "{failed} gradient checks failed{}",
            if caught { "" } else { "; corrupted backward went undetected" }
        )));
    }
    println!("all {} checks passed", lines.len());
    Ok(())
}
