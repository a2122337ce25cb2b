use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use treeprune::model::{save_model, synthesize_model, FixtureSpec};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treeprune"))
        .args(args)
        .env_remove("TREEPRUNE_THREADS")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, template: &str) -> PathBuf {
    let path = dir.join(format!("{template}.onnx"));
    let o = bin(&["synth", template, "-o", p(&path)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    path
}

#[test]
fn inspect_fire_module() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "fire_module");
    let o = bin(&["inspect", p(&m)]);
    assert_eq!(o.status.code(), Some(0));
    let out = text(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.contains(" Conv ")).count(), 4);
    assert!(out.contains("prunable nodes: 3"), "{out}");

    let o = bin(&["inspect", p(&m), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["prunable"], 3);
    assert_eq!(v["excluded"][0], "classifier");
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.onnx");
    std::fs::write(&bad, b"\xff\xff\xff not a model").unwrap();
    let o = bin(&["inspect", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(bin(&["inspect", "/no/such/file.onnx"]).status.code(), Some(2));
    assert_eq!(bin(&["synth", "no_such_template", "-o", p(&dir.path().join("x.onnx"))]).status.code(), Some(2));
}

#[test]
fn unknown_op_is_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = synthesize_model(&FixtureSpec::new("conv_chain").depth(3)).unwrap();
    m.graph.nodes[1].op_type = "MysteryOp".into();
    let path = dir.path().join("mystery.onnx");
    save_model(&m, &path).unwrap();
    let o = bin(&["inspect", p(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("MysteryOp"));
}

#[test]
fn ratio_one_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "conv_chain");
    let o = bin(&["prune", p(&m), "-o", p(&dir.path().join("o.onnx")), "--ratio", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("o.onnx").exists());
}

#[test]
fn prune_validate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "vgg16_cifar");
    let original = std::fs::read(&m).unwrap();
    let (out, plan) = (dir.path().join("pruned.onnx"), dir.path().join("plan.json"));
    let args = [
        "prune", p(&m), "-o", p(&out), "--ratio", "0.5", "--criterion", "l1", "--mode", "tree", "--plan-out", p(&plan),
    ];
    let o = bin(&args);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("sparsity"));
    assert_eq!(std::fs::read(&m).unwrap(), original, "input was modified");

    // Byte-identical artifacts on a second run.
    let (model_bytes, plan_bytes) = (std::fs::read(&out).unwrap(), std::fs::read(&plan).unwrap());
    assert_eq!(bin(&args).status.code(), Some(0));
    assert_eq!(std::fs::read(&out).unwrap(), model_bytes);
    assert_eq!(std::fs::read(&plan).unwrap(), plan_bytes);

    let o = bin(&["validate", p(&m), "--pruned", p(&out), "--plan", p(&plan), "--trials", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", text(&o.stdout), text(&o.stderr));

    let o = bin(&[
        "report", p(&m), "--pruned", p(&out), "--plan", p(&plan), "--reference", "single", "--format", "json",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["overlap"].as_array().unwrap();
    assert_eq!(rows.len(), 14);
    for r in rows {
        let x = r["overlap"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn validate_flags_a_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "conv_chain");
    let (out, plan) = (dir.path().join("pruned.onnx"), dir.path().join("plan.json"));
    let o = bin(&["prune", p(&m), "-o", p(&out), "--ratio", "0.5", "--plan-out", p(&plan)]);
    assert!(o.status.success());
    // A plan for a different model cannot match the pruned weights.
    let other = synthesize_model(&FixtureSpec::new("conv_chain").seed(99)).unwrap();
    let other_path = dir.path().join("other.onnx");
    save_model(&other, &other_path).unwrap();
    let o = bin(&["validate", p(&other_path), "--pruned", p(&out), "--plan", p(&plan), "--trials", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
}

#[test]
fn tree_formats() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "residual_block");
    let o = bin(&["tree", p(&m)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["trees"].as_array().unwrap().is_empty());
    assert!(!v["groups"].as_array().unwrap().is_empty());

    let dot = dir.path().join("trees.dot");
    let o = Command::new(env!("CARGO_BIN_EXE_treeprune"))
        .args(["tree", p(&m), "--format", "dot", "-o", p(&dot)])
        .env("TREEPRUNE_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), "conv_chain");
    let before = std::fs::read(&m).unwrap();
    let o = bin(&["prune", p(&m), "-o", p(&m), "--ratio", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read(&m).unwrap(), before);
}
