use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carrot-cure")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                count_files(&p)
            } else {
                1
            }
        })
        .sum()
}

#[test]
fn synth_writes_class_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let res = run(&["synth", "--out", out.to_str().unwrap(), "--per-class", "5", "--size", "24"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for key in ["cavity_spot", "healthy", "leaf_blight", "fresh_carrot"] {
        assert_eq!(count_files(&out.join(key)), 5, "{key}");
    }
}

#[test]
fn augment_adds_copies() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let dst = dir.path().join("dst");
    assert!(run(&["synth", "--out", src.to_str().unwrap(), "--per-class", "2", "--size", "24"]).status.success());
    let res = run(&["augment", "--in", src.to_str().unwrap(), "--out", dst.to_str().unwrap(), "--copies", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(count_files(&dst), 8 * 3);
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("m.ccur");
    let hist = dir.path().join("h.csv");
    assert!(run(&["synth", "--out", data.to_str().unwrap(), "--per-class", "4", "--size", "32"]).status.success());
    let res = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--model",
        "4",
        "--epochs",
        "2",
        "--batch",
        "8",
        "--out",
        model.to_str().unwrap(),
        "--history",
        hist.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let history = std::fs::read_to_string(&hist).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,"));

    let res = run(&["eval", "--data", data.to_str().unwrap(), "--model", model.to_str().unwrap(), "--format", "json"]);
    assert!(res.status.success());
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["classes"].as_array().unwrap().len(), 4);
    let acc = report["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let res = run(&["eval", "--data", data.to_str().unwrap(), "--model", model.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(String::from_utf8(res.stdout).unwrap().lines().count(), 5);

    let image = data.join("fresh_carrot").read_dir().unwrap().next().unwrap().unwrap().path();
    let res = run(&["predict", "--model", model.to_str().unwrap(), "--image", image.to_str().unwrap()]);
    assert!(res.status.success());
    let body: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(body["probabilities"].as_object().unwrap().len(), 4);
    assert!(body["remedy"]["medicine"].is_string());

    let res = run(&["predict", "--model", model.to_str().unwrap(), "--image", hist.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn missing_model_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ccur");
    let res = run(&["eval", "--data", dir.path().to_str().unwrap(), "--model", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("absent.ccur"));
}

#[test]
fn corrupt_model_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ccur");
    std::fs::write(&bad, b"CCUR not really").unwrap();
    let res = run(&["predict", "--model", bad.to_str().unwrap(), "--image", bad.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("bad.ccur"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--data", "x", "--out", "y", "--model", "9"]).status.code(), Some(1));
    assert_eq!(run(&["synth"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn empty_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ccur");
    let res = run(&["train", "--data", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(res.status.code(), Some(2));
}
