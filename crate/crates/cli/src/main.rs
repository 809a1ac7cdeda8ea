//! `pmfc`: command-line front end for the pathwise mean-field engine.
//!
//! Every run is driven by a strict JSON config, reproducible from its seed
//! alone, and leaves a manifest recording the resolved config plus exact
//! headline numbers. Results are bit-identical for every worker count, and
//! `replay` re-executes a manifest and byte-compares everything it wrote.

mod commands;
mod config;
mod manifest;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::Manifest;
use pathwise_mfc::Exec;

#[derive(Parser)]
#[command(name = "pmfc", version, about = "Pathwise control of mean-field systems driven by Poissonian common noise")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample common-noise point paths and write them as JSON lines.
    SampleNoise(RunArgs),
    /// Optimize a relaxed feedback kernel along one frozen jump path.
    SolvePathwise(RunArgs),
    /// Estimate the optimal cost: optimize a batch of sampled paths
    /// separately and average the per-path values.
    Value(RunArgs),
    /// Solve the mean-field game pathwise: a per-path equilibrium via
    /// damped fixed-point iteration, then certification across paths.
    Mfg(RunArgs),
    /// Run the numerical verification checks configured in the config.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to the named checks (repeatable); default is every
        /// check with a config section.
        #[arg(long = "check", value_name = "NAME")]
        checks: Vec<String>,
    },
    /// Re-execute a manifest's run and byte-compare the summary and every
    /// data file against what is on disk.
    Replay {
        /// Path to a manifest.json written by a previous run.
        #[arg(long)]
        manifest: PathBuf,
        /// Worker threads for the re-run (the comparison must pass for
        /// any value).
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results are identical for every value.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Directory the manifest and data files are written to.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::SampleNoise(run) => execute("sample-noise", &run, &[]),
        Cmd::SolvePathwise(run) => execute("solve-pathwise", &run, &[]),
        Cmd::Value(run) => execute("value", &run, &[]),
        Cmd::Mfg(run) => execute("mfg", &run, &[]),
        Cmd::Verify { run, checks } => execute("verify", &run, &checks),
        Cmd::Replay { manifest, workers } => replay(&manifest, workers),
    }
}

fn execute(command: &str, args: &RunArgs, checks: &[String]) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exec = Exec::with_workers(args.workers);
    let out = commands::run_command(command, &cfg, checks, &exec)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let mut outputs = Vec::with_capacity(out.files.len());
    for (name, contents) in &out.files {
        let path = args.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        outputs.push(name.clone());
    }

    let man = Manifest {
        tool: "pmfc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: cfg.seed,
        checks: checks.to_vec(),
        config: cfg,
        outputs,
        summary: out.summary,
    };
    let path = man.write(&args.out)?;

    for note in &out.notes {
        println!("{note}");
    }
    for (k, v) in &man.summary {
        println!("{k}={v}");
    }
    println!("manifest: {}", path.display());
    Ok(())
}

fn replay(manifest_path: &PathBuf, workers: usize) -> Result<()> {
    let man = Manifest::load(manifest_path)?;
    let dir = manifest_path
        .parent()
        .context("manifest path has no parent directory")?;
    let exec = Exec::with_workers(workers);
    let out = commands::run_command(&man.command, &man.config, &man.checks, &exec)?;

    let mut mismatches: Vec<String> = Vec::new();

    for (key, stored) in &man.summary {
        match out.summary.get(key) {
            Some(now) if now == stored => {}
            Some(now) => mismatches.push(format!("summary {key}: stored {stored}, got {now}")),
            None => mismatches.push(format!("summary {key}: missing from re-run")),
        }
    }
    for key in out.summary.keys() {
        if !man.summary.contains_key(key) {
            mismatches.push(format!("summary {key}: absent from manifest"));
        }
    }

    let regenerated: Vec<&String> = out.files.iter().map(|(name, _)| name).collect();
    for name in &man.outputs {
        if !regenerated.iter().any(|n| *n == name) {
            mismatches.push(format!("file {name}: not regenerated"));
        }
    }
    for (name, contents) in &out.files {
        let path = dir.join(name);
        match fs::read(&path) {
            Ok(disk) if disk == contents.as_bytes() => {}
            Ok(_) => mismatches.push(format!("file {name}: contents differ")),
            Err(e) => mismatches.push(format!("file {name}: {e}")),
        }
    }

    if mismatches.is_empty() {
        println!(
            "replay OK: {} summary keys and {} file(s) match byte-for-byte",
            man.summary.len(),
            out.files.len()
        );
        Ok(())
    } else {
        for m in &mismatches {
            eprintln!("replay mismatch: {m}");
        }
        bail!("replay of {} diverged in {} places", manifest_path.display(), mismatches.len());
    }
}
