use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kd_core::data::{load_dataset, split_dataset};
use kd_core::metrics::evaluate;
use kd_core::nn::{load_model, Model, ModelPreset};
use kd_core::train::{distill, train_baseline, TrainConfig};

fn kdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdistill"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kdistill(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_data() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--out", "data", "--num", "60", "--size", "32", "--seed", "4"]);
    dir
}

#[test]
fn results_match_direct_library_calls() {
    let dir = with_data();
    let d = dir.path();
    ok(d, &["train-teacher", "--data", "data", "--out", "t.kdm", "--epochs", "1", "--seed", "2"]);
    ok(d, &["distill", "--data", "data", "--teacher", "t.kdm", "--out", "s.kdm", "--epochs", "1", "--seed", "2", "--temp", "3"]);
    let json = ok(d, &["eval", "--model", "s.kdm", "--data", "data", "--seed", "2"]);

    let ds = load_dataset(d.join("data")).unwrap();
    let cfg = TrainConfig { epochs: 1, seed: 2, ..TrainConfig::default() };
    let teacher = train_baseline(Model::build(ModelPreset::TinyTeacher, 4, 32, 2).unwrap(), &ds, &cfg).unwrap().model;
    assert_eq!(load_model(d.join("t.kdm")).unwrap(), teacher);
    let mut kd_cfg = cfg.clone();
    kd_cfg.loss.temperature = 3.0;
    let student = distill(&teacher, Model::build(ModelPreset::TinyStudent, 4, 32, 2).unwrap(), &ds, &kd_cfg).unwrap().model;
    assert_eq!(load_model(d.join("s.kdm")).unwrap(), student);
    let val = split_dataset(&ds, cfg.split_fraction, 2).unwrap().val;
    assert_eq!(json.trim(), evaluate(&student, &ds, &val, 0.5).unwrap().to_json().unwrap());

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s.kdm.report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["loss"]["temperature"], 3.0);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = with_data();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"epochs": 1, "learning_rate": 0.01, "loss": {"gamma": 0.0}}"#).unwrap();
    ok(d, &["train-teacher", "--data", "data", "--out", "m.kdm", "--preset", "tiny-s", "--config", "cfg.json", "--lr", "0.002"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m.kdm.report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["learning_rate"], 0.002);
    assert_eq!(report["config"]["loss"]["gamma"], 0.0);
    assert_eq!(report["config"]["epochs"], 1);
}

#[test]
fn gradcam_quadrant_and_bench_write_their_outputs() {
    let dir = with_data();
    let d = dir.path();
    ok(d, &["train-teacher", "--data", "data", "--out", "t.kdm", "--epochs", "1"]);
    ok(d, &["gradcam", "--model", "t.kdm", "--image", "data/images/s00001.pgm", "--class", "2", "--out", "h.pgm"]);
    ok(d, &["gradcam", "--model", "t.kdm", "--image", "data/images/s00001.pgm", "--class", "2", "--out", "h.ppm"]);
    assert!(fs::read(d.join("h.pgm")).unwrap().starts_with(b"P5"));
    assert!(fs::read(d.join("h.ppm")).unwrap().starts_with(b"P6"));

    let table = ok(d, &["quadrant", "--teacher", "t.kdm", "--student", "t.kdm", "--data", "data", "--out", "q.json"]);
    assert!(table.starts_with("Teacher"));
    let q: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("q.json")).unwrap()).unwrap();
    // A model compared with itself never disagrees.
    assert_eq!(q["cells"][1]["count"], 0);
    assert_eq!(q["cells"][2]["count"], 0);

    let bench = ok(d, &["bench", "--model", "tiny-s", "--runs", "3", "--warmup", "0", "--size", "32"]);
    let b: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(b["samples_ms"].as_array().unwrap().len(), 3);
    assert_eq!(b["param_count"], 6164);
}

#[test]
fn exit_codes_separate_usage_data_and_config_errors() {
    let dir = with_data();
    let d = dir.path();
    let code = |args: &[&str]| kdistill(d, args).status.code().unwrap();
    assert_eq!(code(&["distill", "--data", "data", "--out", "x"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train-teacher", "--data", "data", "--out", "x", "--epochs", "0"]), 1);
    assert_eq!(code(&["train-teacher", "--data", "data", "--out", "x", "--preset", "huge"]), 1);
    assert_eq!(code(&["eval", "--model", "missing.kdm", "--data", "data"]), 2);
    fs::write(d.join("junk.kdm"), b"not a model").unwrap();
    assert_eq!(code(&["eval", "--model", "junk.kdm", "--data", "data"]), 2);
    assert_eq!(code(&["--help"]), 0);
}
