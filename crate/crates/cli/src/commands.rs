use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use snake_core::dataset::{generate_synthetic, ingest, split, Dataset, Instance};
use snake_core::energy::save_maps;
use snake_core::geometry::Contour;
use snake_core::inference::InferenceConfig;
use snake_core::metrics::{evaluate, EvalReport};
use snake_core::predictor::{Architecture, MapModes, Predictor};
use snake_core::train::{predict, train, TrainEvent};

use crate::config::{prepare_output, save_config, ArchKind, RunConfig};
use crate::render::overlay_svg;

pub const MODEL_FILE: &str = "model.snk";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub contour: Contour,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

fn select(ds: &Dataset, split: Split) -> Vec<&Instance> {
    match split {
        Split::Train => ds.train(),
        Split::Test => ds.test(),
        Split::All => ds.instances.iter().collect(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn file_name(id: &str) -> String {
    id.replace(['/', '#'], "_")
}

pub fn synth(cfg: &mut RunConfig, out: &Path, force: bool) -> Result<Dataset> {
    prepare_output(out, force)?;
    let d = &cfg.data;
    let mut synth_cfg = d.synth.clone();
    synth_cfg.n = d.train + d.test;
    let mut all = generate_synthetic(&synth_cfg)?;
    let test = all.split_off(d.train);
    let ds = Dataset::new(all, test, serde_json::json!({ "synthetic": synth_cfg }))?;
    ds.save(out)?;
    cfg.paths.out = Some(out.to_path_buf());
    save_config(cfg, out)?;
    eprintln!("wrote {} train + {} test instances to {}", d.train, d.test, out.display());
    Ok(ds)
}

pub fn ingest_cmd(
    cfg: &mut RunConfig,
    images: &Path,
    polygons: &Path,
    inits: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<Dataset> {
    prepare_output(out, force)?;
    let instances = ingest(images, polygons, inits, &cfg.data.ingest)?;
    let f = cfg.data.test_fraction;
    let (train, test) = split(instances, (1.0 - f, f), cfg.data.synth.seed)?;
    cfg.data.train = train.len();
    cfg.data.test = test.len();
    let source = serde_json::json!({
        "ingest": cfg.data.ingest,
        "images": images,
        "polygons": polygons,
        "inits": inits,
    });
    let ds = Dataset::new(train, test, source)?;
    ds.save(out)?;
    cfg.paths.out = Some(out.to_path_buf());
    save_config(cfg, out)?;
    eprintln!("ingested {} train + {} test instances", cfg.data.train, cfg.data.test);
    Ok(ds)
}

/// Trains on the dataset's training split; returns the final model path.
pub fn train_cmd(cfg: &mut RunConfig, data: &Path, out: &Path, force: bool) -> Result<PathBuf> {
    let ds = Dataset::load(data)?;
    prepare_output(out, force)?;
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.out = Some(out.to_path_buf());
    save_config(cfg, out)?;
    let instances = ds.train();
    let m = &ds.manifest;
    let pcfg = cfg.model.predictor(m.width, m.height, m.channels, instances.len());
    let mut predictor = Predictor::new(pcfg, cfg.model.init.clone())?;
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    let (log_path, epochs_path) = (out.join("train_log.jsonl"), out.join("epochs.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut epochs = BufWriter::new(File::create(&epochs_path)?);
    let mut tcfg = cfg.train.clone();
    if tcfg.dump_dir.is_none() {
        tcfg.dump_dir = Some(out.join("nan_dump"));
    }
    let start = Instant::now();
    train(&mut predictor, &instances, &tcfg, |event| {
        match event {
            TrainEvent::Step(s) => {
                serde_json::to_writer(&mut log, s)?;
                log.write_all(b"\n").map_err(|e| snake_core::Error::io(&log_path, e))?;
            }
            TrainEvent::Epoch(s, model) => {
                model.save(&ckpt.join(format!("epoch-{:03}.snk", s.epoch + 1)))?;
                serde_json::to_writer(&mut epochs, s)?;
                epochs.write_all(b"\n").map_err(|e| snake_core::Error::io(&epochs_path, e))?;
                epochs.flush().map_err(|e| snake_core::Error::io(&epochs_path, e))?;
                log.flush().map_err(|e| snake_core::Error::io(&log_path, e))?;
                eprintln!(
                    "epoch {:>3}  hinge {:>10.4}  task loss {:.4}  {:>6.1}s",
                    s.epoch + 1,
                    s.mean_hinge,
                    s.mean_task_loss,
                    start.elapsed().as_secs_f64()
                );
            }
        }
        Ok(())
    })
    .with_context(|| format!("training on {}", data.display()))?;
    log.flush()?;
    let path = out.join(MODEL_FILE);
    predictor.save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(path)
}

pub struct InferOptions {
    pub split: Split,
    pub dump_trajectory: bool,
    pub dump_maps: bool,
}

pub fn infer_cmd(
    cfg: &mut RunConfig,
    model: &Path,
    data: &Path,
    out: &Path,
    force: bool,
    opts: &InferOptions,
) -> Result<Vec<PredictionRecord>> {
    let predictor = Predictor::load(model)?;
    let ds = Dataset::load(data)?;
    if let Architecture::DirectGrid { .. } = predictor.config().architecture {
        if opts.split != Split::Train {
            bail!("a direct-grid model only has maps for the training split; pass --split train");
        }
    }
    let instances = select(&ds, opts.split);
    let m = &ds.manifest;
    predictor.ensure_compatible(m.width, m.height, m.channels)?;
    prepare_output(out, force)?;
    cfg.paths.model = Some(model.to_path_buf());
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.out = Some(out.to_path_buf());
    save_config(cfg, out)?;
    let icfg = InferenceConfig {
        record_trajectory: opts.dump_trajectory,
        ..cfg.infer.clone()
    };
    let start = Instant::now();
    let results = predict(&predictor, &instances, &icfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut w = BufWriter::new(File::create(out.join(PREDICTIONS_FILE))?);
    let mut records = Vec::with_capacity(results.len());
    for (inst, (contour, traj)) in instances.iter().zip(results) {
        let rec = PredictionRecord {
            id: inst.id.clone(),
            contour,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
        if let Some(t) = traj {
            let dir = out.join("trajectories");
            fs::create_dir_all(&dir)?;
            write_json(&dir.join(format!("{}.json", file_name(&inst.id))), &t)?;
        }
        records.push(rec);
    }
    w.flush()?;
    if opts.dump_maps {
        for (i, inst) in instances.iter().enumerate() {
            let maps = predictor.maps(&inst.patch, i)?;
            save_maps(&maps, &out.join("maps").join(file_name(&inst.id)))?;
        }
    }
    eprintln!(
        "{} instances in {:.2}s ({:.1} instances/s)",
        records.len(),
        elapsed,
        records.len() as f64 / elapsed.max(1e-9)
    );
    Ok(records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Pairs predictions with dataset instances by id; every id must exist and
/// appear once.
fn match_ids<'a>(preds: &[PredictionRecord], ds: &'a Dataset) -> Result<Vec<&'a Instance>> {
    let by_id: HashMap<&str, &Instance> = ds.instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut seen = HashSet::new();
    preds
        .iter()
        .map(|p| {
            if !seen.insert(p.id.as_str()) {
                bail!("prediction id {} appears twice", p.id);
            }
            by_id
                .get(p.id.as_str())
                .copied()
                .with_context(|| format!("prediction id {} is not in the dataset", p.id))
        })
        .collect()
}

pub fn eval_cmd(preds_path: &Path, data: &Path, json_out: Option<&Path>) -> Result<EvalReport> {
    let preds = read_predictions(preds_path)?;
    let ds = Dataset::load(data)?;
    let instances = match_ids(&preds, &ds)?;
    let contours: Vec<Contour> = preds.into_iter().map(|p| p.contour).collect();
    let report = evaluate(&contours, &instances)?;
    print!("{}", report.to_table());
    println!("{}", serde_json::to_string(&serde_json::json!({
        "mean_iou": report.mean_iou,
        "area_rmse": report.area_rmse,
        "weighted_coverage": report.weighted_coverage,
    }))?);
    if let Some(p) = json_out {
        write_json(p, &report)?;
    }
    Ok(report)
}

pub fn render_cmd(preds_path: &Path, data: &Path, out: &Path, force: bool, limit: Option<usize>) -> Result<usize> {
    let preds = read_predictions(preds_path)?;
    let ds = Dataset::load(data)?;
    let instances = match_ids(&preds, &ds)?;
    prepare_output(out, force)?;
    let n = limit.unwrap_or(preds.len()).min(preds.len());
    for (p, inst) in preds.iter().zip(&instances).take(n) {
        let svg = overlay_svg(&p.id, &inst.patch, &inst.gt, &inst.init, &p.contour)?;
        let path = out.join(format!("{}.svg", file_name(&p.id)));
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("rendered {n} overlays to {}", out.display());
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub modes: MapModes,
    pub mean_iou: f64,
    pub area_rmse: f64,
    pub weighted_coverage: f64,
}

/// Map-mode variants compared by `ablate`.
pub fn ablation_variants(base: MapModes) -> Vec<(&'static str, MapModes)> {
    vec![
        ("full", base),
        (
            "no_kappa",
            MapModes {
                no_kappa: true,
                ..base
            },
        ),
        (
            "scalar_kappa_beta",
            MapModes {
                kappa_local: false,
                beta_local: false,
                ..base
            },
        ),
        (
            "local_alpha",
            MapModes {
                alpha_local: true,
                ..base
            },
        ),
    ]
}

/// Trains and evaluates each variant on the same data with the same seeds.
pub fn ablate_cmd(cfg: &mut RunConfig, data: &Path, out: &Path, force: bool, only: &[String]) -> Result<Vec<AblationRow>> {
    if cfg.model.architecture == ArchKind::DirectGrid {
        bail!("ablation evaluates on the test split, which needs --arch conv-net");
    }
    for o in only {
        if !ablation_variants(cfg.model.modes).iter().any(|(n, _)| n == o) {
            bail!("unknown variant {o}");
        }
    }
    prepare_output(out, force)?;
    cfg.paths.data = Some(data.to_path_buf());
    cfg.paths.out = Some(out.to_path_buf());
    save_config(cfg, out)?;
    let ds = Dataset::load(data)?;
    let test = ds.test();
    let mut rows = Vec::new();
    for (name, modes) in ablation_variants(cfg.model.modes) {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        eprintln!("== {name}");
        let mut vcfg = cfg.clone();
        vcfg.model.modes = modes;
        let dir = out.join(name);
        let model = train_cmd(&mut vcfg, data, &dir, force)?;
        let predictor = Predictor::load(&model)?;
        let contours: Vec<Contour> = predict(&predictor, &test, &vcfg.infer)?.into_iter().map(|r| r.0).collect();
        let report = evaluate(&contours, &test)?;
        write_json(&dir.join("eval.json"), &report)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            modes,
            mean_iou: report.mean_iou,
            area_rmse: report.area_rmse,
            weighted_coverage: report.weighted_coverage,
        });
    }
    write_json(&out.join("ablation.json"), &rows)?;
    println!("{:<20} {:>9} {:>11} {:>10}", "variant", "mean IoU", "area RMSE", "coverage");
    for r in &rows {
        println!("{:<20} {:>9.4} {:>11.2} {:>10.4}", r.variant, r.mean_iou, r.area_rmse, r.weighted_coverage);
    }
    Ok(rows)
}
