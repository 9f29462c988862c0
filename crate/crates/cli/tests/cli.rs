use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 4

[suite]
styles = ["pinch-top"]
augmentations = 2
samples = 2048

[[suite.templates]]
kind = "sphere"
radius = 0.04

[features]
points = 64

[train]
epochs = 2

[eval]
instances_per_template = 1
"#;

fn isagrasp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isagrasp"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stage(dir: &Path, name: &str) -> String {
    let cfg = dir.join("tiny.toml");
    let out = isagrasp(dir, &[name, "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn stages_run_in_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    assert!(stage(dir.path(), "demo-synth").contains("1 demonstrations"));
    stage(dir.path(), "retarget");
    stage(dir.path(), "augment");
    let refine = stage(dir.path(), "refine");
    assert!(refine.contains("correspondence") && refine.contains("random"), "{refine}");
    let verify = stage(dir.path(), "verify");
    assert!(verify.contains("records verified"), "{verify}");
    stage(dir.path(), "train");
    let eval = stage(dir.path(), "eval");
    for method in ["policy", "random", "heuristic"] {
        assert!(eval.contains(method), "{eval}");
    }
    let report = stage(dir.path(), "report");
    assert!(report.contains("Refinement rate") && report.contains("Lift success"), "{report}");
    let cfg = dir.path().join("tiny.toml");
    let out = isagrasp(dir.path(), &["baseline", "--kind", "heuristic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("heuristic"));
    for f in ["demos.json", "sources.json", "augmented.json", "dataset.jsonl", "refinement.json", "policy.ckpt", "eval.json"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let cfg = dir.path().join("tiny.toml");
    let out = isagrasp(dir.path(), &["config", "--config", cfg.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("seed = 99"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[suite]\nunknown_key = 1\n").unwrap();
    let out = isagrasp(dir.path(), &["demo-synth", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let missing = dir.path().join("nope.toml");
    assert_eq!(isagrasp(dir.path(), &["train", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    // a stage whose input was never produced
    let out = isagrasp(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(isagrasp(dir.path(), &["report"]).status.code(), Some(3));
}
