use std::path::Path;
use std::process::{Command, Output};

#[rustfmt::skip]
const TINY: &[&str] = &[
    "--set", "data.train=12",
    "--set", "data.val=4",
    "--set", "data.test=4",
    "--set", "data.image_size=16",
    "--set", "model.base_width=8",
    "--set", "model.depth=2",
    "--set", "model.disc_depth=2",
    "--set", "model.disc_width=8",
    "--set", "model.embedding_dim=16",
    "--set", "pretrain.steps=5",
    "--set", "encoder.steps=3",
    "--set", "encoder.batch_size=8",
    "--set", "prune.epochs=1",
    "--set", "finetune.epochs=1",
    "--set", "index.k=3",
];

fn run(run_dir: &Path, stage: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manifold-prune"))
        .arg(stage)
        .arg("--run-dir")
        .arg(run_dir)
        .args(TINY)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn prune_before_pretrain_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), "gen-data", &[]).status.success());
    let out = run(dir.path(), "prune", &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().find(|l| l.starts_with("error\t")).unwrap();
    let fields: Vec<&str> = line.split('\t').collect();
    assert_eq!(&fields[..3], &["error", "missing-artifact", "prune"]);
    assert!(fields[3].contains("`pretrain`"));
    assert!(!dir.path().join("prune").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "gen-data", &["--set", "lambda9=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("error\tconfig\tgen-data"));
}

#[test]
fn override_lands_in_snapshot_and_reruns_are_versioned() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.toml");
    std::fs::write(&cfg, "[prune]\nlambda1 = 2.0\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert!(run(dir.path(), "gen-data", &["--config", c, "--set", "lambda1=4.0"]).status.success());
    assert!(run(dir.path(), "gen-data", &["--config", c]).status.success());
    let first = std::fs::read_to_string(dir.path().join("gen-data/config.toml")).unwrap();
    let second = std::fs::read_to_string(dir.path().join("gen-data.1/config.toml")).unwrap();
    assert!(first.contains("lambda1 = 4.0"));
    assert!(second.contains("lambda1 = 2.0"));
}

#[test]
fn full_pipeline_populates_report() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-data", "pretrain", "train-encoder", "build-index", "prune", "finalize", "finetune", "eval", "report"] {
        let out = run(dir.path(), stage, &[]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = dir.path().join("report");
    for f in ["loss_curves.svg", "neighborhoods_original.png", "neighborhoods_pruned.png", "summary.json"] {
        assert!(report.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    let overlap = summary["neighborhood_overlap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    assert!(!dir.path().join(".lock").exists());
}
