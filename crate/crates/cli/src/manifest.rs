//! Run manifests: the machine-readable record a command leaves behind.
//!
//! A manifest stores the resolved configuration, the effective seed, the
//! list of data files written, and a flat string summary of the headline
//! numbers (floats printed at 17 significant digits, so they round-trip
//! exactly). Worker count and timings are deliberately absent: reruns of
//! one manifest must be byte-identical whatever the thread count, and
//! `replay` checks exactly that.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Subcommand that produced this run.
    pub command: String,
    /// Effective master seed (after any command-line override).
    pub seed: u64,
    /// Check-name restriction the run was invoked with (empty: all
    /// configured checks). Only the `verify` command uses it.
    #[serde(default)]
    pub checks: Vec<String>,
    /// The fully resolved configuration the run executed.
    pub config: RunConfig,
    /// Data files written next to this manifest, in write order.
    pub outputs: Vec<String>,
    /// Headline numbers as exact strings, keyed for stable ordering.
    pub summary: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        text.push('\n');
        Ok(text)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))
    }
}
