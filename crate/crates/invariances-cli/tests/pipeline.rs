//! End-to-end integration tests of the binary's stage plumbing on a tiny
//! synthetic dataset: dependency enforcement, artifact layout, manifests,
//! and exit codes.

mod common;

use std::path::Path;
use std::process::Command;

use common::{flags_to_args, tiny_run_flags, write_idx_dataset};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_invariances"))
}

fn run_ok(args: &[String], data: &Path) -> std::process::Output {
    let out = binary()
        .args(args)
        .env("INVARIANCES_DATA", data)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn all_writes_every_artifact_and_a_complete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx_dataset(&data, 48, 32, 8, 8, 0);
    let run_dir = tmp.path().join("run");

    let mut args = vec![
        "all".to_string(),
        "--run.dir".into(),
        run_dir.to_str().unwrap().into(),
        "--seed".into(),
        "7".into(),
    ];
    args.extend(flags_to_args(&tiny_run_flags()));
    run_ok(&args, &data);

    for name in [
        "cnn.ivf",
        "cnn_train.jsonl",
        "gan.ivf",
        "gan_train.jsonl",
        "montage_00.pgm",
        "montage_01.pgm",
        "trajectories_00.jsonl",
        "trajectories_01.jsonl",
        "viz_metrics.json",
        "tail_train.jsonl",
        "mds.csv",
        "mds_scatter.pgm",
        "eval_metrics.json",
        "manifest.json",
    ] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "all");
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["config"]["gan.iters"], 6);
    // every artifact path is relative and exists
    for (label, rel) in manifest["artifacts"].as_object().unwrap() {
        let rel = rel.as_str().unwrap();
        assert!(!rel.starts_with('/'), "{label} path {rel} is absolute");
        assert!(run_dir.join(rel).exists(), "{label} -> {rel} missing");
    }
    for stage in ["train-cnn", "train-gan", "visualize", "evaluate"] {
        assert!(manifest["timings_s"][stage].as_f64().unwrap() > 0.0);
    }
    assert!(manifest["metrics"]["cnn.test_accuracy"].as_f64().is_some());
    assert!(manifest["metrics"]["eval.q_heldout_mse"].as_f64().is_some());

    // the GAN log holds one record per iteration
    let gan_log = std::fs::read_to_string(run_dir.join("gan_train.jsonl")).unwrap();
    assert_eq!(gan_log.lines().count(), 6);
    let first: serde_json::Value = serde_json::from_str(gan_log.lines().next().unwrap()).unwrap();
    assert_eq!(first["iteration"], 0);
    assert!(first["disc_objective"].as_f64().is_some());

    // montage: 3 cells of 8px + 2 separators of 2px = 28 per side
    let pgm = std::fs::read(run_dir.join("montage_00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));

    // MDS CSV: header + one row per (channel, draw) point
    let csv = std::fs::read_to_string(run_dir.join("mds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,y,channel,draw"));
    // layer 2 has 32 output channels; real + 2 draws
    assert_eq!(lines.count(), 32 * 3);
}

#[test]
fn stages_chain_through_a_shared_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx_dataset(&data, 32, 24, 8, 8, 1);
    let run_dir = tmp.path().join("run");
    let rd: String = run_dir.to_str().unwrap().into();

    let base: Vec<String> = flags_to_args(&tiny_run_flags());
    for sub in ["train-cnn", "train-gan", "visualize", "evaluate"] {
        let mut args = vec![sub.to_string(), "--run.dir".into(), rd.clone()];
        args.extend(base.clone());
        run_ok(&args, &data);
    }
    assert!(run_dir.join("cnn.ivf").exists());
    assert!(run_dir.join("gan.ivf").exists());
    assert!(run_dir.join("eval_metrics.json").exists());
    // the last stage's manifest records the evaluate command
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "evaluate");
}

#[test]
fn missing_dependencies_exit_with_the_dependency_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_idx_dataset(&data, 16, 16, 8, 8, 2);
    let empty = tmp.path().join("empty");

    for sub in ["train-gan", "visualize", "evaluate"] {
        let out = binary()
            .args([
                sub,
                "--run.dir",
                empty.to_str().unwrap(),
                "--data.dir",
                data.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(4), "{sub} should report the missing checkpoint");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("checkpoint"), "unhelpful message: {err}");
    }
}

#[test]
fn unreadable_data_exits_with_the_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = binary()
        .args([
            "train-cnn",
            "--run.dir",
            tmp.path().join("r").to_str().unwrap(),
            "--data.dir",
            tmp.path().join("nowhere").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn malformed_config_file_exits_with_the_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"gan.lambada": 2}"#).unwrap();
    let out = binary()
        .args(["train-cnn", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gan.lambada"));
}

#[test]
fn unknown_subcommand_exits_with_the_usage_code() {
    let out = binary().arg("train-dog").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_var_supplies_the_data_directory_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    write_idx_dataset(&good, 16, 16, 8, 8, 3);

    // env alone suffices
    let mut args = vec![
        "train-cnn".to_string(),
        "--run.dir".into(),
        tmp.path().join("r1").to_str().unwrap().into(),
    ];
    args.extend(flags_to_args(&tiny_run_flags()));
    run_ok(&args, &good);

    // an explicit flag beats a bogus env var
    let mut args = vec![
        "train-cnn".to_string(),
        "--run.dir".into(),
        tmp.path().join("r2").to_str().unwrap().into(),
        "--data.dir".into(),
        good.to_str().unwrap().into(),
    ];
    args.extend(flags_to_args(&tiny_run_flags()));
    let out = binary()
        .args(&args)
        .env("INVARIANCES_DATA", tmp.path().join("nowhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
