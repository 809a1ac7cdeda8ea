//! Acceptance gate for the command-line pipeline, matching the style of the
//! engine's acceptance tests: one criterion, one printed PASS/FAIL line.
//!
//! The claim under test: runs are bit-reproducible across worker counts, and
//! any manifest replays byte-identically at either worker count.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pmfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmfc"))
        .args(args)
        .output()
        .expect("binary should execute")
}

fn run(cmd: &str, cfg: &str, dir: &Path, workers: &str) -> Output {
    pmfc(&[
        cmd,
        "--config",
        cfg,
        "--workers",
        workers,
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn c9_runs_are_deterministic_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.json");
    let config = json!({
        "seed": 4242,
        "value": {
            "n_paths": 6,
            "optimizer": {
                "layout": { "time_cells": 4, "space_cells": 4, "control_points": 33 },
                "n_particles": 128,
                "dt": 0.03125,
                "max_sweeps": 4,
                "n_restarts": 1
            }
        },
        "verify": {
            "moment_growth": {
                "rates": [1.5],
                "paths_per_rate": 60,
                "n_particles": 96,
                "dt": 0.03125,
                "layout": { "time_cells": 3, "space_cells": 3, "control_points": 17 }
            }
        }
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let mut mismatches: Vec<String> = Vec::new();
    let mut files_compared = 0usize;
    let mut replays = 0usize;

    // Two command shapes: a Monte Carlo optimization pipeline and a
    // verification battery. Each runs at 1 and 4 workers.
    for cmd in ["value", "verify"] {
        let d1 = tmp.path().join(format!("{cmd}-w1"));
        let d4 = tmp.path().join(format!("{cmd}-w4"));
        for (dir, workers) in [(&d1, "1"), (&d4, "4")] {
            let out = run(cmd, cfg, dir, workers);
            assert!(
                out.status.success(),
                "{cmd} --workers {workers} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }

        // The manifest and every output file it lists must match byte for
        // byte between the two worker counts.
        let man: Value =
            serde_json::from_str(&std::fs::read_to_string(d1.join("manifest.json")).unwrap())
                .unwrap();
        let mut names = vec!["manifest.json".to_string()];
        names.extend(
            man["outputs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string()),
        );
        for name in &names {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d4.join(name)).unwrap();
            files_compared += 1;
            if a != b {
                mismatches.push(format!("{cmd}: {name} differs between workers 1 and 4"));
            }
        }

        // Replaying each manifest at the opposite worker count must
        // regenerate identical summaries and files.
        for (dir, workers) in [(&d1, "4"), (&d4, "1")] {
            let out = pmfc(&[
                "replay",
                "--manifest",
                dir.join("manifest.json").to_str().unwrap(),
                "--workers",
                workers,
            ]);
            replays += 1;
            if !out.status.success() {
                mismatches.push(format!(
                    "{cmd}: replay at {workers} workers failed: {}",
                    String::from_utf8_lossy(&out.stderr)
                ));
            }
        }
    }

    let pass = mismatches.is_empty();
    println!(
        "ACCEPTANCE C9 determinism_replay: {} ({files_compared} output files byte-identical \
         across workers 1 vs 4, {replays} cross-worker replays verified{})",
        if pass { "PASS" } else { "FAIL" },
        if pass { String::new() } else { format!("; {}", mismatches.join("; ")) },
    );
    assert!(pass, "{mismatches:?}");
}
