//! End-to-end tests of the `pmfc` binary: manifests, determinism across
//! worker counts, replay verification, and strict config parsing.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pmfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmfc"))
        .args(args)
        .output()
        .expect("binary should execute")
}

fn write_config(dir: &Path, body: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(body).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn small_layout() -> Value {
    json!({ "time_cells": 3, "space_cells": 3, "control_points": 17 })
}

#[test]
fn noise_manifest_and_paths_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({ "seed": 11, "noise": { "count": 8 } }));
    let out_dir = tmp.path().join("out");

    let out = pmfc(&["sample-noise", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let man = manifest(&out_dir);
    assert_eq!(man["command"], "sample-noise");
    assert_eq!(man["seed"], 11);
    assert_eq!(man["summary"]["n_paths"], "8");
    assert_eq!(man["outputs"], json!(["paths.jsonl"]));

    let jsonl = std::fs::read_to_string(out_dir.join("paths.jsonl")).unwrap();
    let paths: Vec<pathwise_mfc::noise::PointPath> = jsonl
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(paths.len(), 8);
    let total: usize = paths.iter().map(|p| p.jump_count()).sum();
    assert_eq!(man["summary"]["total_events"], total.to_string());
}

#[test]
fn manifests_are_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 23,
            "value": {
                "n_paths": 3,
                "optimizer": {
                    "layout": small_layout(),
                    "n_particles": 64,
                    "dt": 0.0625,
                    "max_sweeps": 3,
                    "n_restarts": 0
                }
            }
        }),
    );
    let dir1 = tmp.path().join("w1");
    let dir4 = tmp.path().join("w4");

    for (dir, workers) in [(&dir1, "1"), (&dir4, "4")] {
        let out = pmfc(&[
            "value",
            "--config",
            &cfg,
            "--out",
            dir.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }

    for file in ["manifest.json", "per_path.csv"] {
        let a = std::fs::read(dir1.join(file)).unwrap();
        let b = std::fs::read(dir4.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between worker counts");
    }
}

#[test]
fn replay_accepts_faithful_runs_and_rejects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 5,
            "solve": {
                "jump_times": [0.4],
                "optimizer": {
                    "layout": small_layout(),
                    "n_particles": 64,
                    "dt": 0.0625,
                    "max_sweeps": 3,
                    "n_restarts": 0
                }
            }
        }),
    );
    let out_dir = tmp.path().join("out");
    let run = pmfc(&["solve-pathwise", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));

    let man_path = out_dir.join("manifest.json");
    let ok = pmfc(&["replay", "--manifest", man_path.to_str().unwrap(), "--workers", "2"]);
    assert!(ok.status.success(), "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("replay OK"));

    // Flip one stored digit; the rerun must detect the divergence.
    let mut man: Value = serde_json::from_str(&std::fs::read_to_string(&man_path).unwrap()).unwrap();
    let stored = man["summary"]["sweeps"].as_str().unwrap().to_string();
    man["summary"]["sweeps"] = Value::String(format!("{}9", stored));
    std::fs::write(&man_path, serde_json::to_string_pretty(&man).unwrap()).unwrap();

    let bad = pmfc(&["replay", "--manifest", man_path.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("replay mismatch"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &json!({ "seed": 11, "noise": { "count": 40 } }));
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");

    for (dir, seed) in [(&dir_a, "901"), (&dir_b, "902")] {
        let out = pmfc(&[
            "sample-noise",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }

    let a = manifest(&dir_a);
    let b = manifest(&dir_b);
    assert_eq!(a["seed"], 901);
    assert_eq!(a["config"]["seed"], 901, "manifest must store the effective seed");
    assert_ne!(
        std::fs::read(dir_a.join("paths.jsonl")).unwrap(),
        std::fs::read(dir_b.join("paths.jsonl")).unwrap(),
        "different seeds must sample different paths"
    );
    assert_ne!(a["summary"], b["summary"]);
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({ "seed": 1, "noise": { "count": 2, "paht_style": "x" } }),
    );
    let out_dir = tmp.path().join("out");
    let out = pmfc(&["sample-noise", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown field"), "stderr: {err}");
}

#[test]
fn verify_subset_runs_only_named_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "seed": 3,
            "verify": {
                "superposition": {
                    "jump_times": [0.5],
                    "layout": small_layout(),
                    "levels": [
                        { "n_particles": 100, "dt": 0.0625 },
                        { "n_particles": 400, "dt": 0.03125 }
                    ],
                    "tolerance": 0.5
                },
                "moment_growth": {
                    "rates": [1.0],
                    "paths_per_rate": 5,
                    "n_particles": 32,
                    "dt": 0.0625,
                    "layout": small_layout()
                }
            }
        }),
    );
    let out_dir = tmp.path().join("out");
    let out = pmfc(&[
        "verify",
        "--config",
        &cfg,
        "--check",
        "moment_growth",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let man = manifest(&out_dir);
    assert_eq!(man["summary"]["checks_run"], "1");
    assert_eq!(man["summary"]["check_moment_growth"], "pass");
    assert!(man["summary"].get("check_superposition").is_none());
    assert!(out_dir.join("report_moment_growth.json").exists());
    assert!(!out_dir.join("report_superposition.json").exists());

    // The stored restriction makes replay regenerate the same subset.
    let man_path = out_dir.join("manifest.json");
    let replay = pmfc(&["replay", "--manifest", man_path.to_str().unwrap()]);
    assert!(replay.status.success(), "stderr: {}", String::from_utf8_lossy(&replay.stderr));
}
