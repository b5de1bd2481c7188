use std::path::Path;
use std::process::{Command, Output};

use augpro::data::load_with_sidecar;
use augpro::distill::TrainedModel;

fn augpro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_augpro"))
        .args(args)
        .output()
        .expect("spawn augpro")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_task(dir: &Path) {
    let out = augpro(&[
        "gen-data", "--out", s(dir), "--vocab-size", "40", "--seq-len", "6", "--classes", "2",
        "--n-train", "64", "--n-unlabeled", "64", "--n-test", "64",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_task(d);
    let train = load_with_sidecar(&d.join("train.jsonl")).unwrap();
    assert_eq!((train.len(), train.meta.vocab_size, train.meta.num_classes), (64, 40, 2));

    let out = augpro(&[
        "train-teacher", "--data", s(&d.join("train.jsonl")), "--out", s(&d.join("t.json")),
        "--eval", s(&d.join("test.jsonl")), "--steps", "100", "--embed-dim", "6", "--hidden", "12",
    ]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["eval_accuracy"].as_f64().unwrap() > 0.5);
    let teacher = TrainedModel::load(&d.join("t.json")).unwrap();
    assert_eq!(teacher.meta.role, "teacher");

    let out = augpro(&[
        "distill", "--teacher", s(&d.join("t.json")), "--data", s(&d.join("unlabeled.jsonl")),
        "--out", s(&d.join("s.json")), "--eval", s(&d.join("test.jsonl")), "--steps", "10",
        "--aug", "augpro-mix", "--aug", "fgsm", "--sign", "random", "--d", "mse", "--no-hard-labels",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("step,split,loss_kd,loss_aug,accuracy\n"));
    assert!(csv.lines().last().unwrap().starts_with("10,test,"));
    let student = TrainedModel::load(&d.join("s.json")).unwrap();
    assert_eq!(student.meta.role, "student");
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("sim.json");
    std::fs::write(&cfg, r#"{"variant": "fgsm", "n": 16, "trials": 50}"#).unwrap();
    let out = augpro(&["sim-diversity", "--config", s(&cfg), "--trials", "20"]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["variant"], "fgsm");
    assert_eq!(r["n"], 16);
    assert_eq!(r["trials"], 20);
}

#[test]
fn user_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_key = d.join("bad.json");
    std::fs::write(&bad_key, r#"{"nn": 16}"#).unwrap();
    let bad_line = d.join("bad.jsonl");
    std::fs::write(&bad_line, "{\"tokens\": [1, 2], \"label\": 0}\nnot json\n").unwrap();
    std::fs::write(
        d.join("bad.meta.json"),
        r#"{"vocab_size": 5, "seq_len": 2, "num_classes": 2, "seed": null, "generator": "manual"}"#,
    )
    .unwrap();
    let t = d.join("t.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["sim-diversity", "--config", s(&bad_key)],
        vec!["sim-diversity", "--n", "0"],
        vec!["sim-diversity", "--variant", "cutmix"],
        vec!["train-teacher", "--data", "/nonexistent/x.jsonl", "--out", s(&t)],
        vec!["train-teacher", "--data", s(&bad_line), "--out", s(&t)],
        vec!["distill", "--teacher", "t", "--data", "d"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = augpro(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn invalid_recipe_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_task(d);
    let t = d.join("t.json");
    let unl = d.join("unlabeled.jsonl");
    let x = d.join("x.json");
    assert!(augpro(&["train-teacher", "--data", s(&d.join("train.jsonl")), "--out", s(&t), "--steps", "5"]).status.success());
    for extra in [["--lambda", "1.5"], ["--epsilon", "0"], ["--aug", "cutout"]] {
        let mut args = vec!["distill", "--teacher", s(&t), "--data", s(&unl), "--out", s(&x), "--steps", "2", "--aug", "augpro-mix", "--aug", "augpro-fgsm"];
        args.extend(extra);
        let out = augpro(&args);
        assert_eq!(out.status.code(), Some(2), "{extra:?}");
    }
    // Teacher trained on a different vocabulary than the transfer set.
    let other = tempfile::tempdir().unwrap();
    let out = augpro(&["gen-data", "--out", s(other.path()), "--vocab-size", "50", "--n-train", "20", "--n-unlabeled", "20", "--n-test", "20"]);
    assert!(out.status.success());
    let out = augpro(&["distill", "--teacher", s(&t), "--data", s(&other.path().join("unlabeled.jsonl")), "--out", s(&x), "--steps", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!x.exists());
}

#[test]
fn svm_demo_text_names_the_misclassified_point() {
    let out = augpro(&["svm-demo"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("beta = (250/533, 200/533), b = -12/13"));
    assert!(text.contains("misclassified: x2"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.csv");
    let out = augpro(&["bench-projection", "--vocab-sizes", "32,64", "--reps", "1", "--out", s(&p)]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "vocab_size,median_seconds,ratio_to_previous,spot_check");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("32,") && lines[1].ends_with(",,ok"));
    assert!(lines[2].ends_with(",ok"));
}
