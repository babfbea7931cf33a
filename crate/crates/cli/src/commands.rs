use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use hierloc::config::{AnchorMode, ManifoldKind, RunConfig};
use hierloc::features::{generate_world, FeatureMatrix, HashTextEncoder, SyntheticWorldSpec};
use hierloc::hierarchy::{read_csv_records, GridGeocoder, Hierarchy, HierarchyBuilder, Level};
use hierloc::index::{beam_search, load_indices, save_indices, PredictionPath};
use hierloc::model::{Checkpoint, EntityTable, HierLocModel};
use hierloc::training::{
    evaluate_model, gradient_suite, model_indices, Dataset, MetricsLog, Trainer, EVAL_CHUNK,
};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::predfile;
use crate::{BuildArgs, CheckGradArgs, EvalArgs, GenArgs, QueryArgs, TrainArgs};

/// Bad command-line usage detected after parsing; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `println!` that returns write errors (a closed pipe) instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn print_json(value: &impl Serialize) -> Result<()> {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn build_hierarchy(a: BuildArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.dataset {
        cfg.hierarchy.dataset = d.into();
    }
    if let Some(d) = a.d_text {
        cfg.model.d_text = d;
    }
    cfg.validate()?;
    if !a.features.is_empty() && a.features.len() != a.csvs.len() {
        return Err(usage(format!(
            "{} --features for {} --csv; give one sidecar per CSV or none",
            a.features.len(),
            a.csvs.len()
        )));
    }
    let geocoder = a.grid_cell_deg.map(GridGeocoder::new);
    let text = HashTextEncoder::new(cfg.model.d_text, a.text_seed);
    let mut builder = HierarchyBuilder::new(cfg.hierarchy.clone(), geocoder.as_ref().map(|g| g as _));
    let mut rows = 0;
    for (i, csv) in a.csvs.iter().enumerate() {
        let sidecar = a.features.get(i).map(|p| FeatureMatrix::load(p)).transpose()?;
        rows += read_csv_records(csv, &cfg.hierarchy, sidecar.as_ref(), |r| builder.push(&r))?;
    }
    let h = builder.finish(Some(&text))?;
    h.save(&a.out)?;
    let stats = json!({
        "rows": rows,
        "level_counts": h.stats.level_counts,
        "skipped": h.skipped,
        "text_seed": a.text_seed,
        "inputs": a.csvs,
        "config": cfg,
    });
    let stats_path = a.stats.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".stats.json");
        PathBuf::from(p)
    });
    write_json(&stats_path, &stats)?;
    print_json(&json!({ "rows": rows, "level_counts": h.stats.level_counts, "skipped": h.skipped }))?;
    Ok(ExitCode::SUCCESS)
}

pub fn gen_synthetic(a: GenArgs) -> Result<ExitCode> {
    let mut spec: SyntheticWorldSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| hierloc::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticWorldSpec::default(),
    };
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.n_countries, a.countries);
    set(&mut spec.regions_per_country, a.regions);
    set(&mut spec.subregions_per_region, a.subregions);
    set(&mut spec.cities_per_subregion, a.cities);
    set(&mut spec.images_per_city, a.images);
    set(&mut spec.d_img, a.d_img);
    if let Some(n) = a.noise {
        spec.visual_noise = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let world = generate_world(&spec)?;
    let files = world.write_dir(&a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    print_json(&json!({
        "rows": world.images.len(),
        "train_csv": files.train_csv,
        "train_features": files.train_features,
        "test_csv": files.test_csv,
        "test_features": files.test_features,
        "ground_truth": files.ground_truth,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn pick(flag: Option<PathBuf>, slot: &mut Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("no {what} given (flag or config data section)")))
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    pick(a.hierarchy, &mut cfg.data.hierarchy);
    pick(a.train_csv, &mut cfg.data.train_csv);
    pick(a.train_features, &mut cfg.data.train_features);
    pick(a.test_csv, &mut cfg.data.test_csv);
    pick(a.test_features, &mut cfg.data.test_features);
    if let Some(m) = a.manifold {
        cfg.model.manifold = m.into();
        if cfg.model.manifold == ManifoldKind::Euclidean {
            cfg.model.anchor_mode = AnchorMode::Tangent;
        }
    }
    if let Some(k) = a.kernel {
        cfg.loss.kernel = k.into();
    }
    if a.no_squared_distance {
        cfg.loss.squared_distance = false;
    }
    if let Some(l) = a.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(t) = a.tau {
        cfg.loss.tau = t;
    }
    if let Some(w) = a.beam_width {
        cfg.train.beam_width = w;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;

    let hierarchy = Hierarchy::load(required(&cfg.data.hierarchy, "hierarchy")?)?;
    let flat = hierarchy.flatten();
    let train = Dataset::load_csv(
        required(&cfg.data.train_csv, "training CSV")?,
        cfg.data.train_features.as_deref(),
        &cfg.hierarchy,
        &flat,
    )?;
    let test = match &cfg.data.test_csv {
        Some(csv) => Some(Dataset::load_csv(csv, cfg.data.test_features.as_deref(), &cfg.hierarchy, &flat)?),
        None => None,
    };
    log::info!("{} training rows ({} skipped)", train.len(), train.skipped);

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let log_path = a.out.join("metrics.jsonl");
    if log_path.exists() {
        std::fs::remove_file(&log_path).with_context(|| format!("removing {}", log_path.display()))?;
    }
    let entities = EntityTable::from_flat(&flat, &cfg.model, train.d_img)?;
    let model = HierLocModel::new(cfg.model.clone(), cfg.loss.clone(), entities, train.d_img, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let history = trainer.run(&train, test.as_ref(), &mut MetricsLog::append_to(&log_path)?)?;

    let ckpt = Checkpoint::from_model(&trainer.model, &cfg, cfg.train.epochs);
    ckpt.save(&a.out.join("checkpoint.hlck"))?;
    let state = trainer.model.entity_state()?;
    save_indices(&a.out.join("index.hlix"), &model_indices(&trainer.model, &state)?)?;
    print_json(&json!({
        "out": a.out,
        "steps": trainer.steps,
        "drift_warnings": trainer.drift_warnings,
        "history": history,
    }))?;
    Ok(ExitCode::SUCCESS)
}

/// Checkpoint, rebuilt model and the hierarchy it was trained on.
fn load_model(checkpoint: &Path, hierarchy: Option<&Path>) -> Result<(HierLocModel, RunConfig, Hierarchy)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.meta.config.clone();
    let hpath = hierarchy
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.hierarchy.clone())
        .ok_or_else(|| usage("no --hierarchy given and none recorded in the checkpoint"))?;
    let h = Hierarchy::load(&hpath)?;
    let entities = EntityTable::from_flat(&h.flatten(), &cfg.model, ckpt.meta.d_img)?;
    let model = ckpt.into_model(entities)?;
    Ok((model, cfg, h))
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let (model, cfg, h) = load_model(ckpt, a.hierarchy.as_deref())?;
            let csv = a
                .csv
                .clone()
                .or_else(|| cfg.data.test_csv.clone())
                .ok_or_else(|| usage("no --csv given and no test CSV recorded in the checkpoint"))?;
            let features = if a.csv.is_some() {
                a.features.clone()
            } else {
                a.features.clone().or_else(|| cfg.data.test_features.clone())
            };
            let ds = Dataset::load_csv(&csv, features.as_deref(), &cfg.hierarchy, &h.flatten())?;
            let width = a.beam_width.unwrap_or(cfg.train.beam_width);
            let metrics = evaluate_model(&model, &ds, width)?;
            json!({
                "checkpoint": ckpt,
                "csv": csv,
                "rows": ds.len(),
                "skipped": ds.skipped,
                "beam_width": width,
                "metrics": metrics,
                "config": cfg,
            })
        }
        (None, Some(preds)) => {
            let truth = a.truth.as_deref().ok_or_else(|| usage("--predictions needs --truth"))?;
            let metrics = predfile::evaluate_files(preds, truth)?;
            json!({ "predictions": preds, "truth": truth, "metrics": metrics })
        }
        (None, None) => return Err(usage("give --checkpoint or --predictions")),
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_feature(s: &str) -> Result<Vec<f64>> {
    s.split(';')
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad feature value '{t}'"))))
        .collect()
}

pub fn query(a: QueryArgs) -> Result<ExitCode> {
    let (model, cfg, _) = load_model(&a.checkpoint, a.hierarchy.as_deref())?;
    let feature = match (&a.feature, &a.features, a.row) {
        (Some(s), _, _) => parse_feature(s)?,
        (None, Some(p), Some(row)) => {
            let m = FeatureMatrix::load(p)?;
            m.row_f64(row)
                .ok_or_else(|| usage(format!("row {row} is outside the {} rows of {}", m.rows(), p.display())))?
        }
        _ => return Err(usage("give --feature or --features with --row")),
    };
    if feature.len() != model.d_img {
        return Err(hierloc::Error::Shape {
            name: "query feature".into(),
            expected: vec![model.d_img],
            found: vec![feature.len()],
        }
        .into());
    }
    let width = a.beam_width.unwrap_or(cfg.train.beam_width);
    let state = model.entity_state()?;
    let indices = match &a.index {
        Some(p) => {
            let idx = load_indices(p)?;
            if idx.iter().zip(&model.entities.ids).any(|(i, ids)| i.ids() != ids.as_slice()) {
                return Err(hierloc::Error::contract("index entities do not match the checkpoint").into());
            }
            idx
        }
        None => model_indices(&model, &state)?,
    };
    let feats = Array2::from_shape_vec((1, feature.len()), feature)?;
    let z = model.refine_images(&state, &feats, EVAL_CHUNK)?;
    let best = beam_search(&indices, z.row(0).as_slice().expect("row"), width)?.best;
    print_path(&model, &best, a.json)?;
    Ok(ExitCode::SUCCESS)
}

fn print_path(model: &HierLocModel, p: &PredictionPath, as_json: bool) -> Result<()> {
    let names = &model.entities.names;
    if as_json {
        let levels: Vec<_> = Level::ALL
            .iter()
            .map(|l| {
                let i = l.index();
                json!({
                    "level": l.name(),
                    "id": p.ids[i],
                    "name": names[i][p.indices[i]],
                    "distance": p.distances[i],
                })
            })
            .collect();
        return print_json(&json!({
            "levels": levels,
            "score": p.score,
            "lat": p.coord.lat(),
            "lon": p.coord.lon(),
        }));
    }
    for l in Level::ALL {
        let i = l.index();
        out!(
            "{:<10} {:<28} {:<20} d={:.6}",
            l.name(),
            p.ids[i],
            names[i][p.indices[i]],
            p.distances[i]
        );
    }
    out!("coord      {:.6}, {:.6}", p.coord.lat(), p.coord.lon());
    out!("score      {:.6}", p.score);
    Ok(())
}

pub fn check_grad(a: CheckGradArgs) -> Result<ExitCode> {
    let suite = gradient_suite(a.seed)?;
    let mut failed = 0;
    let mut worst = 0f64;
    for (name, rep) in &suite {
        worst = worst.max(rep.max_rel_err);
        if !rep.passed() {
            failed += 1;
        }
        if a.verbose || !rep.passed() {
            out!(
                "{} {name}: {} entries, max rel {:.2e}, max abs {:.2e}",
                if rep.passed() { "ok  " } else { "FAIL" },
                rep.checked,
                rep.max_rel_err,
                rep.max_abs_err
            );
        }
    }
    out!(
        "{} of {} cases passed; max relative error {worst:.2e}",
        suite.len() - failed,
        suite.len()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
