use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "vit": {"embed_dim": 16, "heads": 2, "blocks": 4, "mlp_ratio": 2.0},
  "outliers": {"channels": 2, "gain": 4.0, "shift": 8.0},
  "train": {"epochs": 1, "batch_size": 4},
  "data": {"train_per_class": 4, "calib_per_class": 4, "eval_per_class": 4},
  "boosted_blocks": 1,
  "calib_size": 4,
  "importance_samples": 6
}"#;

fn qvit(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.json");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_qvit"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = qvit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts a failure with exactly one machine-parsable stderr line.
fn fails(dir: &Path, args: &[&str], kind: &str) -> String {
    let out = qvit(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "stderr not a single line: {err:?}");
    assert!(
        err.starts_with(&format!("error kind={kind} msg=")),
        "{err:?}"
    );
    err
}

#[test]
fn full_stage_chain_writes_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data"]);
    ok(d, &["train-toy"]);
    ok(d, &["calibrate"]);
    let importance = ok(d, &["score-importance"]);
    assert!(importance.contains("b1.attn"));
    let alloc = ok(d, &["allocate-bits", "--mode", "greedy"]);
    assert!(alloc.starts_with("# mode\tgreedy"));
    ok(d, &["quantize"]);
    let eval = ok(d, &["evaluate"]);
    assert!(eval.contains("full precision") && eval.contains("quantized"));
    ok(d, &["evaluate", "--stage", "calib"]);
    let report = ok(d, &["report"]);

    let run = d.join("run");
    for f in [
        "data/train.manifest",
        "data/eval.manifest.bin",
        "model/params.manifest",
        "model/train_log.json",
        "calib/qmodel.json",
        "quant/params.manifest",
        "importance.tsv",
        "allocation.tsv",
        "eval.json",
        "report.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        std::fs::read_to_string(run.join("report.txt")).unwrap(),
        report
    );
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["stage"], "calib");
    assert_eq!(json["fp"]["agreement"], 1.0);
}

#[test]
fn reproduce_ablation_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data"]);
    ok(d, &["train-toy"]);
    let first = ok(d, &["reproduce-ablation"]);
    let json = std::fs::read(d.join("run/ablation/report.json")).unwrap();
    let second = ok(d, &["reproduce-ablation"]);
    assert_eq!(first, second);
    assert_eq!(
        json,
        std::fs::read(d.join("run/ablation/report.json")).unwrap()
    );
    assert!(
        first.contains("## LayerNorm activation quantizer") && first.contains("## bit allocation")
    );
}

#[test]
fn ablation_needs_three_blocks() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("config.json"),
        TINY.replace(r#""blocks": 4"#, r#""blocks": 2"#),
    )
    .unwrap();
    ok(d, &["gen-data"]);
    ok(d, &["train-toy"]);
    let err = fails(d, &["reproduce-ablation"], "config");
    assert!(err.contains("3 blocks"), "{err}");
}

#[test]
fn missing_upstream_artifacts_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let err = fails(tmp.path(), &["train-toy"], "usage");
    assert!(err.contains("gen-data"));
    fails(tmp.path(), &["quantize"], "usage");
    fails(tmp.path(), &["report"], "usage");
}

#[test]
fn bad_flags_and_configs_fail_cleanly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fails(d, &["gen-data", "--mode", "bogus"], "usage");
    fails(d, &["no-such-command"], "usage");
    fails(d, &["gen-data", "--bits", "1"], "config");
    fails(d, &["gen-data", "--percentile", "150"], "config");
    fails(d, &["evaluate", "--stage", "nope"], "usage");

    let bad = TempDir::new().unwrap();
    std::fs::write(bad.path().join("config.json"), r#"{"unknown_key": 1}"#).unwrap();
    fails(bad.path(), &["gen-data"], "format");
}

#[test]
fn quantize_rejects_foreign_layers() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data"]);
    ok(d, &["train-toy"]);
    ok(d, &["score-importance"]);
    ok(d, &["allocate-bits"]);
    let path = d.join("run/allocation.tsv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("b9.fc1\t4\t4\n");
    std::fs::write(&path, text).unwrap();
    fails(d, &["quantize"], "config");
}
