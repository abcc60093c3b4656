//! End-to-end checks of the command-line interface: artifacts, exit codes,
//! and report determinism.

use std::path::Path;
use std::process::Command;

use nncompress::harness::model_io::load_model;
use nncompress::harness::report::read_reports;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nncompress"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn base_config(pipeline: &str) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "synthetic_blobs", "classes": 4, "shape": [1, 12, 12],
              "noise": 0.25, "seed": 7, "train_count": 160, "test_count": 48}},
  "model": {{"arch": "snn", "hidden": 16}},
  "train": {{"learning_rate": 0.05, "batch_size": 16, "steps": 40, "seed": 42}},
  "prune": {{"mode": "one_shot", "final_sparsity": 0.75}},
  "factorize": {{"energy": 0.9, "fine_tune_steps": 10}},
  "distill": {{"temperature": 4.0, "soft_weight": 0.5,
              "student": {{"arch": "snn", "hidden": 8}}, "steps": 30}},
  "pipeline": [{pipeline}],
  "timing": {{"enabled": false, "repeats": 3}}
}}"#
    )
}

#[test]
fn train_then_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config(""));
    let model_path = dir.path().join("model.slim");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "5", "--out"])
        .arg(&model_path)
        .status()
        .unwrap();
    assert!(status.success());
    let (model, mask) = load_model(&model_path).unwrap();
    assert!(mask.is_none());
    assert_eq!(model.input_shape, (1, 12, 12));

    // Evaluate the saved model through the CLI.
    let eval_cfg = write_config(
        dir.path(),
        "eval.json",
        &format!(
            r#"{{
  "dataset": {{"kind": "synthetic_blobs", "classes": 4, "shape": [1, 12, 12],
              "noise": 0.25, "seed": 7, "train_count": 160, "test_count": 48}},
  "model": {{"arch": "file", "path": {:?}}}
}}"#,
            model_path.to_str().unwrap()
        ),
    );
    let out_json = dir.path().join("eval.json.out");
    let status = bin()
        .args(["eval", "--config"])
        .arg(&eval_cfg)
        .args(["--out"])
        .arg(&out_json)
        .status()
        .unwrap();
    assert!(status.success());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let acc = parsed["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn prune_saves_mask_at_target_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config(""));
    let out = dir.path().join("pruned.slim");
    let status = bin()
        .args(["prune", "--config"])
        .arg(&cfg)
        .args(["--sparsity", "0.5", "--one-shot", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let (_, mask) = load_model(&out).unwrap();
    let mask = mask.expect("pruned container must carry the mask");
    assert!((mask.sparsity() - 0.5).abs() < 1e-3);
}

#[test]
fn factorize_and_distill_produce_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config(""));

    let fact_out = dir.path().join("lowrank.slim");
    let status = bin()
        .args(["factorize", "--config"])
        .arg(&cfg)
        .args(["--energy", "0.95", "--out"])
        .arg(&fact_out)
        .status()
        .unwrap();
    assert!(status.success());
    let (fact_model, _) = load_model(&fact_out).unwrap();
    assert!(fact_model.layers.len() > 10, "conv layers should be split");

    let student_out = dir.path().join("student.slim");
    let status = bin()
        .args(["distill", "--config"])
        .arg(&cfg)
        .args(["--temperature", "2.0", "--out"])
        .arg(&student_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(student_out.exists());
    assert!(dir.path().join("student.slmt").exists(), "soft-target cache");
}

#[test]
fn pipeline_reports_are_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = r#"
    {"pass": "distill", "student": {"arch": "snn", "hidden": 8}, "steps": 20},
    {"pass": "prune", "mode": "gradual", "final_sparsity": 0.5,
     "interval": 5, "events": 3, "steps": 25}
  "#;
    let cfg = write_config(dir.path(), "cfg.json", &base_config(pipeline));
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");
    for out in [&out_a, &out_b] {
        let status = bin()
            .args(["pipeline", "--config"])
            .arg(&cfg)
            .args(["--seed", "9", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap(),
        "same seed and config must produce byte-identical reports"
    );
    let reports = read_reports(&out_a).unwrap();
    assert_eq!(reports.first().unwrap().method, "baseline");
    assert_eq!(reports.last().unwrap().method, "combined");
    assert_eq!(reports.len(), 4);
}

#[test]
fn report_against_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &base_config(""));

    let baseline = dir.path().join("baseline.slim");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&baseline)
        .status()
        .unwrap()
        .success());

    let pruned = dir.path().join("pruned.slim");
    assert!(bin()
        .args(["prune", "--config"])
        .arg(&cfg)
        .args(["--sparsity", "0.75", "--one-shot", "--out"])
        .arg(&pruned)
        .status()
        .unwrap()
        .success());

    let report_cfg = write_config(
        dir.path(),
        "report.json",
        &format!(
            r#"{{
  "dataset": {{"kind": "synthetic_blobs", "classes": 4, "shape": [1, 12, 12],
              "noise": 0.25, "seed": 7, "train_count": 160, "test_count": 48}},
  "model": {{"arch": "file", "path": {:?}}}
}}"#,
            pruned.to_str().unwrap()
        ),
    );
    let out = dir.path().join("report.out.json");
    let status = bin()
        .args(["report", "--config"])
        .arg(&report_cfg)
        .args(["--baseline"])
        .arg(&baseline)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let reports = read_reports(&out).unwrap();
    assert_eq!(reports.len(), 1);
    // 75% one-shot pruning against the dense baseline: close to 4x.
    assert!(
        (reports[0].compression_rate - 4.0).abs() < 0.05,
        "rate {}",
        reports[0].compression_rate
    );
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();

    // Usage error: unknown flag.
    let status = bin().args(["train", "--no-such-flag"]).status().unwrap();
    assert_eq!(status.code(), Some(1));

    // Config error: malformed JSON.
    let bad_cfg = write_config(dir.path(), "bad.json", "{ not json");
    let status = bin()
        .args(["train", "--config"])
        .arg(&bad_cfg)
        .args(["--out"])
        .arg(dir.path().join("x.slim"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // Data/format error: model file with a bad magic.
    let bogus = dir.path().join("bogus.slim");
    std::fs::write(&bogus, b"NOPE....").unwrap();
    let cfg = write_config(
        dir.path(),
        "file.json",
        &format!(
            r#"{{
  "dataset": {{"kind": "synthetic_blobs", "classes": 4, "shape": [1, 12, 12],
              "noise": 0.25, "seed": 7, "train_count": 32, "test_count": 16}},
  "model": {{"arch": "file", "path": {:?}}}
}}"#,
            bogus.to_str().unwrap()
        ),
    );
    let status = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("eval.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Help exits 0.
    let status = bin().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
}
