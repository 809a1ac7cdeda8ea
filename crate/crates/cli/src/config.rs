//! Run configuration: one strict JSON document per run.
//!
//! Every section is parsed with `deny_unknown_fields`, so typos in knob
//! names fail loudly instead of silently falling back to defaults. The
//! benchmark block reuses the scalar linear-quadratic parameter struct from
//! the engine crate; all commands run on that model family.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pathwise_mfc::kernel::KernelLayout;
use pathwise_mfc::model::{make_lq_problem, LqParams, Problem};
use pathwise_mfc::noise::{MarkDistribution, PointEvent, PointPath};
use pathwise_mfc::optimizer::{OptimizerOptions, PolicyOptimizerOptions};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scalar linear-quadratic benchmark parameters; the model every
    /// command runs on. Omitted fields take the benchmark defaults.
    #[serde(default)]
    pub benchmark: LqParams,
    /// Master seed. Every stream any command uses is derived from it, so
    /// two runs of one config differ in nothing but wall-clock time.
    pub seed: u64,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub solve: Option<SolveConfig>,
    #[serde(default)]
    pub value: Option<ValueConfig>,
    #[serde(default)]
    pub mfg: Option<MfgConfig>,
    #[serde(default)]
    pub verify: Option<VerifyConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn problem(&self) -> Result<Problem> {
        Ok(make_lq_problem(self.benchmark)?)
    }
}

/// Feedback-kernel discretization: uniform time cells, uniform space cells
/// per axis, and a uniform grid on the control box.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    pub time_cells: usize,
    pub space_cells: usize,
    pub control_points: usize,
}

impl LayoutConfig {
    pub fn build(&self) -> KernelLayout {
        KernelLayout::new(self.time_cells, self.space_cells, self.control_points)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// How many independent point paths to sample.
    pub count: usize,
}

/// Knobs of the per-path kernel optimizer, shared by every command that
/// descends on a frozen path.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerKnobs {
    pub layout: LayoutConfig,
    pub n_particles: usize,
    pub dt: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_one")]
    pub n_restarts: usize,
    #[serde(default = "default_one_f")]
    pub se_factor: f64,
    /// Re-evaluate the chosen kernel on independent streams with this many
    /// particles (0 skips the re-evaluation).
    #[serde(default)]
    pub eval_particles: usize,
    /// Step size of the re-evaluation; defaults to `dt`.
    #[serde(default)]
    pub eval_dt: Option<f64>,
}

impl OptimizerKnobs {
    pub fn build(&self, seed: u64) -> OptimizerOptions {
        let mut opts =
            OptimizerOptions::new(self.layout.build(), self.n_particles, self.dt, seed);
        opts.max_sweeps = self.max_sweeps;
        opts.n_restarts = self.n_restarts;
        opts.se_factor = self.se_factor;
        opts.eval_particles = self.eval_particles;
        opts.eval_dt = self.eval_dt.unwrap_or(self.dt);
        opts.store_flow = false;
        opts
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    /// Jump times of the frozen common-noise path (marks come from the
    /// benchmark's mark law; see [`frozen_path`]).
    #[serde(default)]
    pub jump_times: Vec<f64>,
    pub optimizer: OptimizerKnobs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueConfig {
    /// Size of the sampled path batch the value is averaged over.
    pub n_paths: usize,
    pub optimizer: OptimizerKnobs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfgConfig {
    pub n_paths: usize,
    pub layout: LayoutConfig,
    pub n_particles: usize,
    pub dt: f64,
    #[serde(default = "default_mfg_iters")]
    pub max_iters: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol_w2")]
    pub tol_w2: f64,
    #[serde(default = "default_mfe_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_one")]
    pub n_restarts: usize,
    /// Particle count of the independent consistency re-simulation.
    #[serde(default = "default_resim")]
    pub resim_particles: usize,
    #[serde(default = "default_consistency_tol")]
    pub consistency_tol: f64,
    #[serde(default = "default_converged_frac")]
    pub min_converged_frac: f64,
}

/// Which verification checks run is decided by which sections are present.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default)]
    pub superposition: Option<SuperpositionConfig>,
    #[serde(default)]
    pub value_equivalence: Option<EquivalenceConfig>,
    #[serde(default)]
    pub strict_gap: Option<StrictGapConfig>,
    #[serde(default)]
    pub martingale_residual: Option<ResidualConfig>,
    #[serde(default)]
    pub moment_growth: Option<MomentConfig>,
    #[serde(default)]
    pub value_continuity: Option<ContinuityConfig>,
}

/// One refinement level: particle count and step size.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    pub n_particles: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperpositionConfig {
    #[serde(default)]
    pub jump_times: Vec<f64>,
    /// Layout of the (midpoint-Dirac) kernel driving both sides.
    pub layout: LayoutConfig,
    pub levels: Vec<LevelConfig>,
    /// Bound the finest level's flow distance must meet.
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub n_paths: usize,
    pub pathwise: OptimizerKnobs,
    pub policy_layout: LayoutConfig,
    #[serde(default = "default_count_cap")]
    pub count_cap: usize,
    /// Bucket edges of the last-jump-time coarsening; empty means
    /// `[0, T/2, T]`.
    #[serde(default)]
    pub time_bucket_edges: Vec<f64>,
    #[serde(default = "default_policy_sweeps")]
    pub policy_max_sweeps: usize,
    #[serde(default = "default_band")]
    pub oracle_rel_band: f64,
}

impl EquivalenceConfig {
    pub fn policy_options(&self, seed: u64) -> PolicyOptimizerOptions {
        let mut p =
            PolicyOptimizerOptions::new(self.pathwise.n_particles, self.pathwise.dt, seed);
        p.max_sweeps = self.policy_max_sweeps;
        p.se_factor = self.pathwise.se_factor;
        p
    }

    pub fn bucket_edges(&self, horizon: f64) -> Vec<f64> {
        if self.time_bucket_edges.is_empty() {
            vec![0.0, horizon / 2.0, horizon]
        } else {
            self.time_bucket_edges.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrictGapConfig {
    #[serde(default)]
    pub jump_times: Vec<f64>,
    pub optimizer: OptimizerKnobs,
    #[serde(default = "default_band")]
    pub rel_band: f64,
    #[serde(default = "default_entropy_frac")]
    pub entropy_frac: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    #[serde(default)]
    pub jump_times: Vec<f64>,
    /// Layout of the (midpoint-Dirac) kernel the flow is generated under.
    pub layout: LayoutConfig,
    pub levels: Vec<LevelConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub rates: Vec<f64>,
    pub paths_per_rate: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub layout: LayoutConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuityConfig {
    /// Mean shifts on the first state axis, strictly decreasing.
    pub shifts: Vec<f64>,
    pub n_paths: usize,
    pub optimizer: OptimizerKnobs,
    #[serde(default = "default_band")]
    pub rel_band: f64,
    #[serde(default = "default_abs_tol")]
    pub abs_tolerance: f64,
}

/// A frozen path from configured jump times. Marks are deterministic: the
/// unique mark when the law is a single atom, the most probable (first on
/// ties) for other finite laws, the box center for uniform laws. Benchmarks
/// whose jump map ignores the mark are unaffected by this choice.
pub fn frozen_path(problem: &Problem, jump_times: &[f64]) -> Result<PointPath> {
    let mark = match &problem.intensity.mark {
        MarkDistribution::Finite { marks, probs } => {
            let mut best = 0usize;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            marks[best].clone()
        }
        MarkDistribution::BoxUniform { lo, hi } => {
            lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()
        }
    };
    let events = jump_times
        .iter()
        .map(|&t| PointEvent { time: t, mark: mark.clone() })
        .collect();
    Ok(PointPath::new(problem.horizon, events)?)
}

fn default_one() -> usize {
    1
}
fn default_one_f() -> f64 {
    1.0
}
fn default_max_sweeps() -> usize {
    10
}
fn default_policy_sweeps() -> usize {
    8
}
fn default_mfg_iters() -> usize {
    25
}
fn default_damping() -> f64 {
    0.5
}
fn default_tol_w2() -> f64 {
    0.02
}
fn default_mfe_sweeps() -> usize {
    4
}
fn default_resim() -> usize {
    4096
}
fn default_consistency_tol() -> f64 {
    0.05
}
fn default_converged_frac() -> f64 {
    0.9
}
fn default_count_cap() -> usize {
    2
}
fn default_band() -> f64 {
    0.05
}
fn default_entropy_frac() -> f64 {
    0.25
}
fn default_abs_tol() -> f64 {
    0.05
}
