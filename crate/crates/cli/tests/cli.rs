use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use snake_core::dataset::{Dataset, InstanceRecord};
use snake_core::predictor::Predictor;

fn snake(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snake"))
        .current_dir(dir)
        .env_remove("SNAKE_OUT_ROOT")
        .args(args)
        .output()
        .expect("spawn snake")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = snake(dir, args);
    assert!(
        out.status.success(),
        "snake {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &[&str] = &["--n-train", "4", "--n-test", "3", "--size", "32", "--nodes", "20", "--seed", "7"];

fn small_dataset(dir: &Path, name: &str) {
    let mut args = vec!["synth", "--out", name];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

fn records(dir: &Path) -> Vec<InstanceRecord> {
    fs::read_to_string(dir.join("polygons.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_default_counts() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--out", "d", "--size", "32"]);
    let ds = Dataset::load(&t.path().join("d")).unwrap();
    assert_eq!((ds.train().len(), ds.test().len()), (200, 100));
    assert!(t.path().join("d/run_config.json").exists());
}

#[test]
fn synth_is_reproducible_and_refuses_to_overwrite() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "a");
    small_dataset(t.path(), "b");
    let ma = fs::read(t.path().join("a/manifest.json")).unwrap();
    let mb = fs::read(t.path().join("b/manifest.json")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(t.path().join("a/polygons.jsonl")).unwrap(),
        fs::read(t.path().join("b/polygons.jsonl")).unwrap()
    );
    let again = snake(t.path(), &["synth", "--out", "a"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = vec!["synth", "--out", "a", "--force"];
    forced.extend_from_slice(SMALL);
    ok(t.path(), &forced);
}

#[test]
fn l_shapes_have_six_vertices() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--out", "d", "--shape", "l-shape"];
    args.extend_from_slice(SMALL);
    ok(t.path(), &args);
    let recs = records(&t.path().join("d"));
    assert_eq!(recs.len(), 7);
    assert!(recs.iter().all(|r| r.gt_polygon.len() == 6));
}

#[test]
fn out_root_env_applies_to_relative_outputs() {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("root");
    let mut args = vec!["synth", "--out", "d"];
    args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_snake"))
        .current_dir(t.path())
        .env("SNAKE_OUT_ROOT", &root)
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("d/manifest.json").exists());
    assert!(!t.path().join("d").exists());
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "d");
    ok(t.path(), &["train", "--data", "d", "--out", "r", "--epochs", "1", "--lr", "0", "--l2", "0", "--optimizer", "sgd"]);
    let trained = Predictor::load(&t.path().join("r/model.snk")).unwrap();
    let fresh = Predictor::new(trained.config().clone(), trained.init_config().clone()).unwrap();
    assert_eq!(trained.params(), fresh.params());
    assert!(t.path().join("r/checkpoints/epoch-001.snk").exists());
    let log = fs::read_to_string(t.path().join("r/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["iter", "hinge", "task_loss", "energy_gap", "lr"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn stored_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "d");
    ok(t.path(), &["train", "--data", "d", "--out", "r1", "--max-steps", "3", "--lr", "1e-3"]);
    ok(t.path(), &["train", "--config", "r1/run_config.json", "--data", "d", "--out", "r2"]);
    assert_eq!(
        fs::read(t.path().join("r1/model.snk")).unwrap(),
        fs::read(t.path().join("r2/model.snk")).unwrap()
    );
}

#[test]
fn infer_eval_render_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    small_dataset(p, "d");
    ok(p, &["train", "--data", "d", "--out", "r", "--max-steps", "2"]);
    ok(p, &["infer", "--model", "r/model.snk", "--data", "d", "--out", "p1", "--dump-maps", "--dump-trajectory"]);
    ok(p, &["infer", "--model", "r/model.snk", "--data", "d", "--out", "p2"]);
    let preds = fs::read(p.join("p1/predictions.jsonl")).unwrap();
    assert_eq!(preds, fs::read(p.join("p2/predictions.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&preds).lines().count(), 3);

    let maps = fs::read_dir(p.join("p1/maps")).unwrap().next().unwrap().unwrap().path();
    for grid in ["D.f32", "alpha.f32", "beta.f32", "kappa.f32"] {
        assert_eq!(fs::metadata(maps.join(grid)).unwrap().len(), 32 * 32 * 4, "{grid}");
    }
    let traj = fs::read_dir(p.join("p1/trajectories")).unwrap().count();
    assert_eq!(traj, 3);

    let out = ok(p, &["eval", "--preds", "p1/predictions.jsonl", "--data", "d", "--json", "eval.json"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean IoU"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("eval.json")).unwrap()).unwrap();
    let iou = report["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&iou));

    ok(p, &["render", "--preds", "p1/predictions.jsonl", "--data", "d", "--out", "svg"]);
    let svgs: Vec<_> = fs::read_dir(p.join("svg")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(svgs.len(), 3);
    let text = fs::read_to_string(&svgs[0]).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.tag_name().namespace(), Some("http://www.w3.org/2000/svg"));
    assert_eq!(root.attribute("version"), Some("1.1"));
    let polys: Vec<_> = root.children().filter(|n| n.has_tag_name("polygon")).collect();
    assert_eq!(polys.len(), 3);
    let strokes: Vec<_> = polys.iter().map(|n| n.attribute("stroke").unwrap()).collect();
    assert_eq!(strokes, ["#00FF00", "#0000FF", "#FFFF00"]);
    assert!(polys[0].attribute("stroke-dasharray").is_none());
    assert!(polys[1].attribute("stroke-dasharray").is_some());
    assert!(polys[2].attribute("stroke-dasharray").is_some());
    for poly in &polys {
        assert_eq!(poly.attribute("points").unwrap().split_whitespace().count(), 20);
    }
    let image = root.children().find(|n| n.has_tag_name("image")).unwrap();
    let href = image.attribute(("http://www.w3.org/1999/xlink", "href")).unwrap();
    assert!(href.starts_with("data:image/png;base64,"));
}

#[test]
fn eval_rejects_unknown_ids() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    small_dataset(p, "d");
    let rec = &records(&p.join("d"))[0];
    let line = serde_json::json!({ "id": "nope", "contour": rec.gt });
    fs::write(p.join("bad.jsonl"), format!("{line}\n")).unwrap();
    let out = snake(p, &["eval", "--preds", "bad.jsonl", "--data", "d"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn direct_grid_infers_on_training_split_only() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    small_dataset(p, "d");
    ok(p, &["train", "--data", "d", "--out", "r", "--arch", "direct-grid", "--max-steps", "2"]);
    assert!(!snake(p, &["infer", "--model", "r/model.snk", "--data", "d", "--out", "x"]).status.success());
    ok(p, &["infer", "--model", "r/model.snk", "--data", "d", "--out", "y", "--split", "train"]);
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    small_dataset(p, "d");
    let out = ok(p, &["ablate", "--data", "d", "--out", "a", "--max-steps", "1"]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(p.join("a/ablation.json")).unwrap()).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_kappa", "scalar_kappa_beta", "local_alpha"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("scalar_kappa_beta"));
    assert!(!snake(p, &["ablate", "--data", "d", "--out", "b", "--variant", "bogus"]).status.success());
}
