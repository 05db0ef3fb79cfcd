use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchcast::nn::ptwf;

fn patchcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchcast"))
        .args(args)
        .env_remove("PATCHCAST_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = patchcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_checksum(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["checksum"].as_str().unwrap().to_string()
}

const SMALL_JOB: &str = r#"{
  "task": { "context": 12, "horizons": [1, 2] },
  "model": {
    "kind": "patched",
    "backbone": null,
    "expand_to_series": true,
    "d_llm": 8,
    "adapter_hidden": 8,
    "output_hidden": 8
  },
  "train": { "epochs": 2, "batch_size": 16 }
}"#;

/// A small generated panel and a job file for it.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&["generate", "--series", "6", "--periods", "48", "--out", s(&data)]);
    let job = root.join("job.json");
    std::fs::write(&job, SMALL_JOB).unwrap();
    (data, job)
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        ok(&[
            "generate",
            "--series",
            "3",
            "--periods",
            "20",
            "--seed",
            seed,
            "--out",
            s(dir),
        ]);
    }
    assert_eq!(manifest_checksum(&a), manifest_checksum(&b));
    assert_ne!(manifest_checksum(&a), manifest_checksum(&c));
    assert_eq!(
        std::fs::read(a.join("target.csv")).unwrap(),
        std::fs::read(b.join("target.csv")).unwrap()
    );
}

#[test]
fn single_series_has_one_row_per_period() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--series", "1", "--periods", "8", "--out", s(tmp.path())]);
    let text = std::fs::read_to_string(tmp.path().join("target.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("series_id,period,value"));
    assert_eq!(lines.count(), 8);
    assert!(tmp.path().join("effective_config.json").is_file());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, job) = fixture(tmp.path());
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&job),
        "--lr",
        "0",
        "--out",
        s(&run),
    ]);
    let initial = ptwf::load(&run.join("checkpoints/epoch_0.ptwf")).unwrap();
    let last = ptwf::load(&run.join("final.ptwf")).unwrap();
    assert!(initial.bit_eq(&last));
}

#[test]
fn evaluate_against_own_run_gives_unit_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, job) = fixture(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--config", s(&job), "--out", s(&run)]);
    let ev = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--model",
        s(&run),
        "--baseline",
        s(&run.join("eval.json")),
        "--out",
        s(&ev),
    ]);
    let table = std::fs::read_to_string(ev.join("ratios.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.ends_with(",1.000")), "{table}");
}

#[test]
fn diagnose_and_plot_read_training_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, job) = fixture(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--data", s(&data), "--config", s(&job), "--out", s(&run)]);
    let diag = tmp.path().join("diag");
    ok(&[
        "diagnose",
        "--weights",
        s(&run.join("checkpoints")),
        "--all-layers",
        "--out",
        s(&diag),
    ]);
    for k in 0..=2 {
        assert!(diag.join(format!("epoch_{k}.esd.json")).is_file());
    }
    let plots = tmp.path().join("plots");
    ok(&[
        "plot",
        "--report",
        s(&diag.join("epoch_2.esd.json")),
        s(&run.join("history.json")),
        "--out",
        s(&plots),
    ]);
    let svgs = std::fs::read_dir(&plots).unwrap().count();
    assert!(svgs >= 2);
}

#[test]
fn invalid_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{ "series": 0 }"#).unwrap();
    let out = patchcast(&["generate", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.series"));

    std::fs::write(&bad, r#"{ "seriez": 3 }"#).unwrap();
    let out = patchcast(&["generate", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = patchcast(&[
        "train",
        "--data",
        s(&tmp.path().join("nowhere")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_patchcast"))
        .args(["generate", "--series", "1", "--periods", "8", "--out", s(tmp.path())])
        .env("PATCHCAST_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--out",
        "--seed",
        "--verbose",
        "--data",
        "--backbone",
        "--epochs",
        "--lr",
    ] {
        assert!(help.contains(flag), "missing {flag}");
    }
    assert!(help.contains("[default: 7]"));
    let out = patchcast(&["generate", "--bogus"]);
    assert!(!out.status.success());
}
