use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hierloc::config::RunConfig;
use hierloc::features::FeatureMatrix;
use hierloc::hierarchy::Hierarchy;
use hierloc::model::{Checkpoint, EntityTable, HierLocModel};
use hierloc::training::Dataset;
use serde_json::Value;
use tempfile::TempDir;

fn hierloc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierloc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

const FIXTURE: &str = "country,region,subregion,city,lat,lon
FR,IDF,Paris75,Paris,48.85,2.35
FR,IDF,Paris75,Paris,48.86,2.36
DE,Bavaria,Munich-SR,Munich,48.14,11.58
";

const SMALL_MODEL: &str = r#"{"model": {"d": 16, "heads": 2, "hidden_ent": 32, "hidden_img": 32,
 "hidden_fuse": 32, "d_text": 8, "loc_scales": 2}, "optim": {"lr": 0.005}}"#;

#[test]
fn build_hierarchy_fixture_stats_and_determinism() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("f.csv"), FIXTURE).unwrap();
    let stats = ok(&hierloc(&["build-hierarchy", "--csv", "f.csv", "-o", "h.json"], dir.path()));
    let expect: Value = serde_json::json!({"0": 1, "1": 1, "2": 2, "3": 2, "4": 2, "5": 2});
    assert_eq!(stats["level_counts"], expect);
    let first = std::fs::read(dir.path().join("h.json")).unwrap();
    ok(&hierloc(&["build-hierarchy", "--csv", "f.csv", "-o", "h.json"], dir.path()));
    assert_eq!(first, std::fs::read(dir.path().join("h.json")).unwrap());
    let side: Value = serde_json::from_slice(&std::fs::read(dir.path().join("h.json.stats.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["model"]["d_text"], 64);
}

#[test]
fn missing_lat_column_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("f.csv"), "country,region,subregion,city,lon\nFR,a,b,c,1\n").unwrap();
    let out = hierloc(&["build-hierarchy", "--csv", "f.csv", "-o", "h.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lat"));
}

fn gen(dir: &Path, out: &str, noise: &str, seed: &str) -> Value {
    ok(&hierloc(
        &[
            "gen-synthetic", "-o", out, "--countries", "2", "--regions", "2", "--subregions", "2", "--cities", "2",
            "--images", "5", "--d-img", "16", "--noise", noise, "--seed", seed,
        ],
        dir,
    ))
}

#[test]
fn gen_synthetic_counts_determinism_and_validation() {
    let dir = TempDir::new().unwrap();
    let a = gen(dir.path(), "a", "0.1", "4");
    assert_eq!(a["rows"], 80);
    gen(dir.path(), "b", "0.1", "4");
    for f in ["train.csv", "test.csv", "train.feat", "test.feat", "ground_truth.csv", "spec.json"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(x, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let out = hierloc(&["gen-synthetic", "-o", "c", "--cities", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

struct World {
    dir: TempDir,
}

impl World {
    fn new(noise: &str) -> Self {
        let dir = TempDir::new().unwrap();
        gen(dir.path(), "w", noise, "1");
        std::fs::write(dir.path().join("cfg.json"), SMALL_MODEL).unwrap();
        ok(&hierloc(
            &["build-hierarchy", "--csv", "w/train.csv", "--features", "w/train.feat", "-o", "h.json", "--d-text", "8"],
            dir.path(),
        ));
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Value {
        let mut args = vec![
            "train", "--config", "cfg.json", "--hierarchy", "h.json", "--train-csv", "w/train.csv",
            "--train-features", "w/train.feat", "--test-csv", "w/test.csv", "--test-features", "w/test.feat", "-o",
            out,
        ];
        args.extend_from_slice(extra);
        ok(&hierloc(&args, self.path()))
    }

    fn test_records(&self, run: &str) -> Vec<Value> {
        std::fs::read_to_string(self.path().join(run).join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap())
            .filter(|v| v["split"] == "test")
            .collect()
    }
}

#[test]
fn zero_epochs_checkpoint_equals_init() {
    let w = World::new("0.1");
    w.train("run", &["--epochs", "0", "--seed", "7"]);
    let ckpt = Checkpoint::load(&w.path().join("run/checkpoint.hlck")).unwrap();
    let cfg: RunConfig = RunConfig::load(&w.path().join("run/config.json")).unwrap();
    assert_eq!(ckpt.meta.config, cfg);
    assert_eq!(ckpt.meta.epoch, 0);
    let h = Hierarchy::load(&w.path().join("h.json")).unwrap();
    let ents = EntityTable::from_flat(&h.flatten(), &cfg.model, 16).unwrap();
    let init = HierLocModel::new(cfg.model.clone(), cfg.loss.clone(), ents, 16, 7).unwrap();
    assert_eq!(ckpt.params, init.params);
}

#[test]
fn training_improves_country_accuracy_and_eval_reproduces_it() {
    let w = World::new("0.1");
    let summary = w.train("run", &["--epochs", "20"]);
    assert!(summary["steps"].as_u64().unwrap() > 0);
    let recs = w.test_records("run");
    let first = recs.first().unwrap()["acc_country"].as_f64().unwrap();
    let last = recs.last().unwrap();
    assert!(last["acc_country"].as_f64().unwrap() > first, "{first} -> {last}");
    let rep = ok(&hierloc(&["eval", "--checkpoint", "run/checkpoint.hlck"], w.path()));
    assert_eq!(rep["metrics"]["acc_country"], last["acc_country"]);
    assert_eq!(rep["metrics"]["geoscore"], last["geoscore"]);
    assert_eq!(rep["config"]["train"]["epochs"], 20);
}

#[test]
fn euclidean_ablation_and_flags_run() {
    let w = World::new("0.1");
    w.train(
        "euc",
        &["--epochs", "2", "--manifold", "euclidean", "--kernel", "gauss", "--no-squared-distance", "--lambda", "0.5", "--tau", "0.2", "--beam-width", "3"],
    );
    let cfg = RunConfig::load(&w.path().join("euc/config.json")).unwrap();
    assert_eq!(cfg.model.manifold, hierloc::config::ManifoldKind::Euclidean);
    assert!(!cfg.loss.squared_distance);
    assert_eq!((cfg.loss.lambda, cfg.loss.tau, cfg.train.beam_width), (0.5, 0.2, 3));
    assert_eq!(w.test_records("euc").len(), 3);
    let q = ok(&hierloc(
        &["query", "--checkpoint", "euc/checkpoint.hlck", "--features", "w/test.feat", "--row", "0", "--json"],
        w.path(),
    ));
    assert_eq!(q["levels"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_on_perfect_predictions_scores_5000() {
    let dir = TempDir::new().unwrap();
    gen(dir.path(), "w", "0.1", "2");
    let rep = ok(&hierloc(
        &["eval", "--predictions", "w/ground_truth.csv", "--truth", "w/ground_truth.csv", "--out", "r.json"],
        dir.path(),
    ));
    assert_eq!(rep["metrics"]["geoscore"], 5000.0);
    assert_eq!(rep["metrics"]["acc_city"], 1.0);
    assert!(dir.path().join("r.json").exists());
}

#[test]
fn check_grad_passes_on_the_toy_world() {
    let dir = TempDir::new().unwrap();
    let out = hierloc(&["check-grad"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    let worst: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst <= 1e-4, "{text}");
}

#[test]
fn missing_checkpoint_fails() {
    let dir = TempDir::new().unwrap();
    let out = hierloc(&["query", "--checkpoint", "none.hlck", "--feature", "1;2"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.hlck"));
    let out = hierloc(&["eval", "--checkpoint", "none.hlck"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn query_of_a_city_prototype_returns_its_path() {
    let w = World::new("0");
    w.train("run", &["--epochs", "30"]);
    let feats = FeatureMatrix::load(&w.path().join("w/train.feat")).unwrap();
    let h = Hierarchy::load(&w.path().join("h.json")).unwrap();
    let cfg = RunConfig::default();
    let ds = Dataset::load_csv(
        &w.path().join("w/train.csv"),
        Some(&w.path().join("w/train.feat")),
        &cfg.hierarchy,
        &h.flatten(),
    )
    .unwrap();
    let index: PathBuf = w.path().join("run/index.hlix");
    for row in (0..feats.rows()).step_by(4) {
        let feature: Vec<String> = feats.row(row).unwrap().iter().map(|x| format!("{x:e}")).collect();
        let q = ok(&hierloc(
            &[
                "query", "--checkpoint", "run/checkpoint.hlck", "--feature", &feature.join(";"), "--index",
                index.to_str().unwrap(), "--json",
            ],
            w.path(),
        ));
        let got: Vec<&str> = q["levels"].as_array().unwrap().iter().map(|l| l["id"].as_str().unwrap()).collect();
        assert_eq!(got, ds.samples[row].ids.iter().map(String::as_str).collect::<Vec<_>>(), "row {row}");
    }
}
