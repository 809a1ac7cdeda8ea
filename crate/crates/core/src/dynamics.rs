//! Pathwise particle dynamics.
//!
//! Once a realization of the common point path is frozen, the conditional
//! McKean-Vlasov dynamics become deterministic in the jump component: the
//! state diffuses between consecutive jump times and is mapped pointwise by
//! the jump response at each of them. This module simulates an interacting
//! particle system along exactly that structure:
//!
//! * [`SimGrid`] lays an Euler grid over the span with every jump time
//!   inserted as a marked node;
//! * [`propagate_fp`] advances the particle cloud (Euler-Maruyama between
//!   nodes, pointwise jump map at jump nodes) under a relaxed feedback
//!   control law, with the mean-field argument either the cloud's own
//!   empirical law or a frozen [`MeasureFlow`], and accumulates the relaxed
//!   running cost per particle by the trapezoidal rule;
//! * [`extract_continuous_part`] and [`concatenate`] implement the two
//!   structural operations behind that description: splitting a cadlag
//!   ensemble into its continuous motion plus accumulated jump increments,
//!   and splicing a post-jump continuation onto a pre-jump segment with the
//!   jump-consistency condition enforced;
//! * [`simulate_common_noise_system`] runs the full system over a batch of
//!   sampled point paths under a jump-history feedback policy and averages
//!   the realized costs.
//!
//! Draw discipline: each particle consumes exactly one uniform (control
//! index) plus `dim_noise` normals per step, whatever the kernel looks
//! like, so runs with identical substreams stay aligned across control
//! laws — the basis of every common-random-number comparison upstream.

use crate::error::{CoreError, Result};
use crate::exec::{Exec, PARTICLE_CHUNK};
use crate::kernel::ControlKernel;
use crate::measures::{
    moment, CloudView, FlowJump, MeasureArg, MeasureFlow, NodeStats, ParticleCloud, PathJump,
    PiecewisePath,
};
use crate::model::Problem;
use crate::noise::PointPath;
use crate::rng::{self, tag};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Simulation grid on a time span: uniform base nodes at spacing at most
/// `dt`, plus one node per jump time of the frozen point path.
#[derive(Clone, Debug)]
pub struct SimGrid {
    pub times: Vec<f64>,
    /// `(node index, event index into the point path)`, ascending.
    pub jump_nodes: Vec<(usize, usize)>,
    pub dt: f64,
}

impl SimGrid {
    /// Grid over `[0, path.horizon]`.
    pub fn build(dt: f64, path: &PointPath) -> Result<Self> {
        Self::build_segment(dt, 0.0, path.horizon, path)
    }

    /// Grid over `[t0, t1]` carrying the events of `path` with time in
    /// `(t0, t1]` (a jump exactly at `t0` belongs to the segment before).
    pub fn build_segment(dt: f64, t0: f64, t1: f64, path: &PointPath) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(CoreError::GridMismatch(format!("time step {dt} must be positive")));
        }
        if !t0.is_finite() || !t1.is_finite() || t1 <= t0 {
            return Err(CoreError::GridMismatch(format!("degenerate span [{t0}, {t1}]")));
        }
        let span = t1 - t0;
        let n_base = (span / dt).ceil().max(1.0) as usize;
        let mut times: Vec<f64> = (0..=n_base)
            .map(|k| t0 + span * k as f64 / n_base as f64)
            .collect();
        *times.last_mut().unwrap() = t1;

        let selected: Vec<(usize, f64)> = path
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.time > t0 && e.time <= t1)
            .map(|(ix, e)| (ix, e.time))
            .collect();
        for &(_, t) in &selected {
            if let Err(pos) = times.binary_search_by(|x| x.total_cmp(&t)) {
                times.insert(pos, t);
            }
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::GridMismatch("grid nodes not strictly increasing".into()));
        }
        let jump_nodes = selected
            .into_iter()
            .map(|(ix, t)| {
                let node = times
                    .binary_search_by(|x| x.total_cmp(&t))
                    .expect("jump time was inserted");
                (node, ix)
            })
            .collect();
        Ok(Self { times, jump_nodes, dt })
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// First node at or after `t` (clamped to the last node). Consistent
    /// with [`ControlKernel::time_cell`]: the returned node is the first one
    /// whose time cell is `t`'s or later.
    pub fn first_node_at_or_after(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x < t).min(self.times.len() - 1)
    }

    /// Trapezoidal quadrature weight of each node.
    pub fn quad_weights(&self) -> Vec<f64> {
        let k = self.times.len();
        (0..k)
            .map(|j| {
                let lo = if j == 0 { self.times[0] } else { self.times[j - 1] };
                let hi = if j + 1 == k { self.times[k - 1] } else { self.times[j + 1] };
                0.5 * (hi - lo)
            })
            .collect()
    }
}

/// A feedback control law, possibly depending on the running jump history
/// of the common path. Between jumps the law is one [`ControlKernel`]; the
/// kernel may switch when a jump arrives.
pub trait ControlLaw: Sync {
    fn kernel_for(&self, jumps_so_far: usize, last_jump_time: f64) -> &ControlKernel;

    /// Index of the history state backing `kernel_for`, used to slot
    /// visitation counts. Single-kernel laws live in state 0.
    fn state_index(&self, _jumps_so_far: usize, _last_jump_time: f64) -> usize {
        0
    }

    fn n_states(&self) -> usize {
        1
    }
}

impl ControlLaw for ControlKernel {
    fn kernel_for(&self, _jumps_so_far: usize, _last_jump_time: f64) -> &ControlKernel {
        self
    }
}

/// Feedback policy measurable with respect to the running jump history,
/// coarsened to finitely many states: jump count (capped) times a bucket of
/// the last jump time. State 0 is "no jump yet".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpHistoryPolicy {
    /// Jump counts at or above the cap share kernels; `cap >= 1`.
    pub count_cap: usize,
    /// Bucket edges for the last jump time, increasing, covering the
    /// horizon; times outside are clamped to the outer buckets.
    pub time_bucket_edges: Vec<f64>,
    /// `1 + count_cap * n_time_buckets` kernels with identical geometry.
    pub kernels: Vec<ControlKernel>,
}

impl JumpHistoryPolicy {
    pub fn new(count_cap: usize, time_bucket_edges: Vec<f64>, kernels: Vec<ControlKernel>) -> Result<Self> {
        if count_cap == 0 {
            return Err(CoreError::InvalidKernel("history count cap must be >= 1".into()));
        }
        if time_bucket_edges.len() < 2 || time_bucket_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::InvalidKernel("bad history time buckets".into()));
        }
        let want = 1 + count_cap * (time_bucket_edges.len() - 1);
        if kernels.len() != want {
            return Err(CoreError::InvalidKernel(format!(
                "{} kernels for {} history states",
                kernels.len(),
                want
            )));
        }
        for k in &kernels {
            k.validate()?;
            if !k.same_geometry(&kernels[0]) {
                return Err(CoreError::InvalidKernel("history kernels differ in geometry".into()));
            }
        }
        Ok(Self { count_cap, time_bucket_edges, kernels })
    }

    /// All states share one midpoint-Dirac kernel initially.
    pub fn midpoint(
        problem: &Problem,
        layout: &crate::kernel::KernelLayout,
        count_cap: usize,
        time_bucket_edges: Vec<f64>,
    ) -> Result<Self> {
        let base = ControlKernel::dirac_midpoint(problem, layout, &[])?;
        let n = 1 + count_cap * (time_bucket_edges.len() - 1);
        Self::new(count_cap, time_bucket_edges, vec![base; n])
    }

    fn time_bucket(&self, t: f64) -> usize {
        let ntb = self.time_bucket_edges.len() - 1;
        match self.time_bucket_edges.binary_search_by(|e| e.total_cmp(&t)) {
            Ok(k) => k.min(ntb - 1),
            Err(0) => 0,
            Err(k) => (k - 1).min(ntb - 1),
        }
    }

    /// History states that a given point path passes through.
    pub fn states_visited(&self, path: &PointPath) -> Vec<usize> {
        let mut seen = vec![0usize];
        for (k, ev) in path.events.iter().enumerate() {
            let s = self.state_index(k + 1, ev.time);
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        seen.sort_unstable();
        seen
    }
}

impl ControlLaw for JumpHistoryPolicy {
    fn kernel_for(&self, jumps_so_far: usize, last_jump_time: f64) -> &ControlKernel {
        &self.kernels[self.state_index(jumps_so_far, last_jump_time)]
    }

    fn state_index(&self, jumps_so_far: usize, last_jump_time: f64) -> usize {
        if jumps_so_far == 0 {
            return 0;
        }
        let cb = jumps_so_far.min(self.count_cap) - 1;
        let ntb = self.time_bucket_edges.len() - 1;
        1 + cb * ntb + self.time_bucket(last_jump_time)
    }

    fn n_states(&self) -> usize {
        self.kernels.len()
    }
}

/// Seeds of the two independent substream families a run consumes. Keeping
/// them separate lets two runs share initial particles while drawing fresh
/// driving noise (or vice versa).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StreamPlan {
    pub init_seed: u64,
    pub noise_seed: u64,
}

impl StreamPlan {
    pub fn single(seed: u64) -> Self {
        Self { init_seed: seed, noise_seed: seed }
    }

    /// Independent plan for the `path_index`-th run of a batch.
    pub fn for_path(&self, path_index: usize) -> Self {
        Self {
            init_seed: rng::derive_seed(self.init_seed, tag::INIT, &[path_index as u64]),
            noise_seed: rng::derive_seed(self.noise_seed, tag::NOISE, &[path_index as u64]),
        }
    }
}

/// What the mean-field argument of the coefficients is during a run.
#[derive(Clone, Copy)]
pub enum MeanFieldMode<'a> {
    /// The cloud's own empirical law, recomputed every node (the coupled
    /// McKean-Vlasov system).
    SelfConsistent,
    /// A frozen flow on the identical grid (best response of a single agent
    /// against a fixed population). The flow's particle count may differ.
    Frozen(&'a MeasureFlow),
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub n_particles: usize,
    pub dt: f64,
    pub streams: StreamPlan,
    pub store_flow: bool,
    pub store_trajectories: bool,
    pub record_checkpoints: bool,
}

impl SimOptions {
    pub fn new(n_particles: usize, dt: f64, seed: u64) -> Self {
        Self {
            n_particles,
            dt,
            streams: StreamPlan::single(seed),
            store_flow: true,
            store_trajectories: false,
            record_checkpoints: false,
        }
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
}

/// The p-th moment of the cloud immediately before and after one jump,
/// against the recursion bound `(1 + 2M)^p (1 + before^p)` implied by the
/// declared growth constant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JumpMomentRecord {
    pub time: f64,
    pub before: f64,
    pub after: f64,
    pub bound: f64,
}

impl JumpMomentRecord {
    pub fn violated(&self) -> bool {
        self.after > self.bound * (1.0 + 1e-9)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SimDiagnostics {
    pub jump_moments: Vec<JumpMomentRecord>,
    pub moment_violations: usize,
    /// Per `(history state, time cell, space cell)` particle-step counts,
    /// flattened as `state * n_cells + tc * n_space + sc`.
    pub visits: Vec<u64>,
    pub n_steps: usize,
}

/// Full per-particle snapshot at a node: enough to restart the simulation
/// there bit-for-bit. Taken at nodes where a kernel time cell begins, so a
/// candidate kernel differing only from cell `k` onward can be evaluated
/// without re-simulating the prefix.
#[derive(Clone, Debug)]
pub struct SimCheckpoint {
    pub node: usize,
    pub states: Vec<f64>,
    pub rngs: Vec<ChaCha8Rng>,
    pub prefix_cost: Vec<f64>,
}

/// Ensemble of cadlag particle trajectories on a shared grid, stored
/// node-major with pre-jump left limits kept at every jump node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    n_particles: usize,
    /// nodes x particles x dim
    data: Vec<f64>,
    jump_nodes: Vec<usize>,
    /// jumps x particles x dim
    left_data: Vec<f64>,
}

impl PathEnsemble {
    pub fn new(
        times: Vec<f64>,
        dim: usize,
        n_particles: usize,
        data: Vec<f64>,
        jump_nodes: Vec<usize>,
        left_data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != times.len() * n_particles * dim {
            return Err(CoreError::DimensionMismatch(format!(
                "{} values for {} nodes x {} particles x dim {}",
                data.len(),
                times.len(),
                n_particles,
                dim
            )));
        }
        if left_data.len() != jump_nodes.len() * n_particles * dim
            || jump_nodes.windows(2).any(|w| w[1] <= w[0])
            || jump_nodes.iter().any(|&j| j == 0 || j >= times.len())
        {
            return Err(CoreError::DimensionMismatch("inconsistent jump records".into()));
        }
        Ok(Self { times, dim, n_particles, data, jump_nodes, left_data })
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn jump_nodes(&self) -> &[usize] {
        &self.jump_nodes
    }

    /// All particle states at a node (post-jump values at jump nodes).
    pub fn states_at(&self, node: usize) -> &[f64] {
        let b = self.n_particles * self.dim;
        &self.data[node * b..(node + 1) * b]
    }

    /// Pre-jump states at the `k`-th jump node.
    pub fn left_states(&self, k: usize) -> &[f64] {
        let b = self.n_particles * self.dim;
        &self.left_data[k * b..(k + 1) * b]
    }

    pub fn trajectory(&self, i: usize) -> Result<PiecewisePath> {
        let d = self.dim;
        let values: Vec<f64> = (0..self.n_nodes())
            .flat_map(|j| self.states_at(j)[i * d..(i + 1) * d].iter().copied())
            .collect();
        let jumps = self
            .jump_nodes
            .iter()
            .enumerate()
            .map(|(k, &node)| PathJump {
                node,
                left: self.left_states(k)[i * d..(i + 1) * d].to_vec(),
            })
            .collect();
        PiecewisePath::new(self.times.clone(), d, values, jumps)
    }

    /// Flow of empirical marginals of the ensemble (uniform weights).
    pub fn to_flow(&self) -> Result<MeasureFlow> {
        let n = self.n_particles;
        let w = vec![1.0 / n as f64; n];
        let jumps = self
            .jump_nodes
            .iter()
            .enumerate()
            .map(|(k, &node)| {
                let pts = self.left_states(k).to_vec();
                let stats = NodeStats::of(CloudView { dim: self.dim, points: &pts, weights: &w });
                FlowJump { node, left_points: pts, left_stats: stats }
            })
            .collect();
        MeasureFlow::from_parts(self.times.clone(), self.dim, w, self.data.clone(), jumps)
    }
}

#[derive(Debug)]
pub struct SimOutput {
    pub grid: SimGrid,
    pub flow: Option<MeasureFlow>,
    pub ensemble: Option<PathEnsemble>,
    pub cost: CostEstimate,
    pub per_particle_cost: Vec<f64>,
    pub final_states: Vec<f64>,
    pub checkpoints: Vec<SimCheckpoint>,
    pub diagnostics: SimDiagnostics,
}

pub(crate) struct RunFlags {
    pub store_flow: bool,
    pub store_traj: bool,
    pub checkpoints: bool,
}

pub(crate) enum Start<'a> {
    Fresh { init_seed: u64, noise_seed: u64 },
    Given { states: Vec<f64>, noise_seed: u64 },
    Resume(&'a SimCheckpoint),
}

struct StepScratch {
    drift: Vec<f64>,
    diff: Vec<f64>,
    normals: Vec<f64>,
    gamma: Vec<f64>,
}

impl StepScratch {
    fn new(dim: usize, dim_noise: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            diff: vec![0.0; dim * dim_noise],
            normals: vec![0.0; dim_noise],
            gamma: vec![0.0; dim],
        }
    }
}

/// Core particle loop shared by every public entry point.
pub(crate) fn run_particles<L: ControlLaw + ?Sized>(
    problem: &Problem,
    grid: &SimGrid,
    path: &PointPath,
    law: &L,
    mean_field: MeanFieldMode<'_>,
    n_particles: usize,
    start: Start<'_>,
    flags: &RunFlags,
    exec: &Exec,
) -> Result<SimOutput> {
    let dim = problem.dim_state;
    let dn = problem.dim_noise;
    let n = n_particles;
    if n == 0 {
        return Err(CoreError::EmptyCloud);
    }
    let n_nodes = grid.n_nodes();
    let block = n * dim;
    let coeffs = &*problem.coeffs;

    if let MeanFieldMode::Frozen(flow) = mean_field {
        if flow.dim != dim {
            return Err(CoreError::DimensionMismatch(format!(
                "frozen flow dim {} vs state dim {dim}",
                flow.dim
            )));
        }
        if flow.times != grid.times {
            return Err(CoreError::GridMismatch(
                "frozen flow grid differs from simulation grid".into(),
            ));
        }
        let fj: Vec<usize> = flow.jumps().iter().map(|j| j.node).collect();
        let gj: Vec<usize> = grid.jump_nodes.iter().map(|&(jn, _)| jn).collect();
        if fj != gj {
            return Err(CoreError::GridMismatch("frozen flow jump nodes differ".into()));
        }
    }

    let (mut states, mut rngs, mut acc, start_node, resumed) = match start {
        Start::Fresh { init_seed, noise_seed } => {
            let mut states = vec![0.0; block];
            for (i, chunk) in states.chunks_mut(dim).enumerate() {
                let mut r = rng::substream1(init_seed, tag::INIT, i as u64);
                problem.initial.sample_into(&mut r, chunk);
            }
            let rngs: Vec<ChaCha8Rng> = (0..n)
                .map(|i| rng::substream1(noise_seed, tag::NOISE, i as u64))
                .collect();
            (states, rngs, vec![0.0; n], 0usize, false)
        }
        Start::Given { states, noise_seed } => {
            if states.len() != block {
                return Err(CoreError::DimensionMismatch(format!(
                    "{} start values for {n} particles of dim {dim}",
                    states.len()
                )));
            }
            let rngs: Vec<ChaCha8Rng> = (0..n)
                .map(|i| rng::substream1(noise_seed, tag::NOISE, i as u64))
                .collect();
            (states, rngs, vec![0.0; n], 0usize, false)
        }
        Start::Resume(ck) => {
            if ck.states.len() != block || ck.rngs.len() != n || ck.prefix_cost.len() != n {
                return Err(CoreError::DimensionMismatch("checkpoint does not match run shape".into()));
            }
            if ck.node >= n_nodes {
                return Err(CoreError::GridMismatch("checkpoint node outside grid".into()));
            }
            (ck.states.clone(), ck.rngs.clone(), ck.prefix_cost.clone(), ck.node, true)
        }
    };
    if resumed && (flags.store_flow || flags.store_traj) {
        return Err(CoreError::InvalidConfig(
            "flow/trajectory storage is only available on full runs".into(),
        ));
    }

    // Jump-history bookkeeping (jumps at or before a resume node were
    // applied before the checkpoint was taken).
    let mut jumps_done = 0usize;
    let mut last_jump_time = f64::NEG_INFINITY;
    let mut jump_cursor = 0usize;
    for (c, &(jn, ev)) in grid.jump_nodes.iter().enumerate() {
        if resumed && jn <= start_node {
            jumps_done += 1;
            last_jump_time = path.events[ev].time;
            jump_cursor = c + 1;
        }
    }
    let mut kernel = law.kernel_for(jumps_done, last_jump_time);
    let kernel_cells = kernel.n_cells();
    let n_space = kernel.n_space_cells();
    let mut visit_base = law.state_index(jumps_done, last_jump_time) * kernel_cells;

    let ckpt_nodes: Vec<usize> = if flags.checkpoints {
        if law.n_states() != 1 {
            return Err(CoreError::InvalidConfig(
                "checkpoints require a single-kernel control law".into(),
            ));
        }
        let edges = &kernel.time_edges;
        let mut nodes: Vec<usize> = edges[..edges.len() - 1]
            .iter()
            .map(|&e| grid.first_node_at_or_after(e))
            .filter(|&nd| nd >= start_node)
            .collect();
        nodes.dedup();
        nodes
    } else {
        Vec::new()
    };
    let mut ckpt_cursor = 0usize;

    let weights = vec![1.0 / n as f64; n];
    let wts = grid.quad_weights();
    let mut flow_data = if flags.store_flow { vec![0.0; n_nodes * block] } else { Vec::new() };
    let mut traj_data = if flags.store_traj { vec![0.0; n_nodes * block] } else { Vec::new() };
    let mut mu_buffer = vec![0.0; if flags.store_flow { 0 } else { block }];
    let mut flow_jumps: Vec<FlowJump> = Vec::new();
    let mut ens_jump_nodes: Vec<usize> = Vec::new();
    let mut ens_left: Vec<f64> = Vec::new();
    let mut checkpoints: Vec<SimCheckpoint> = Vec::new();
    let mut diagnostics = SimDiagnostics {
        visits: vec![0; law.n_states() * kernel_cells],
        ..Default::default()
    };
    let p_ord = problem.moment_order;
    let growth = 1.0 + 2.0 * problem.declared_lipschitz;

    for j in start_node..n_nodes {
        let t = grid.times[j];

        // 1. Jump map (left limit -> post-jump state), skipped at a resume
        // node where it already happened before the snapshot.
        if jump_cursor < grid.jump_nodes.len() && grid.jump_nodes[jump_cursor].0 == j {
            let ev = grid.jump_nodes[jump_cursor].1;
            jump_cursor += 1;
            let mark = path.events[ev].mark.clone();
            let left_copy = states.clone();
            let left_view = CloudView { dim, points: &left_copy, weights: &weights };
            let left_stats = NodeStats::of(left_view);
            if !left_stats.mean.iter().all(|m| m.is_finite()) || !left_stats.second_moment.is_finite()
            {
                return Err(CoreError::NonFinite {
                    source_name: "particle cloud".into(),
                    detail: format!("left limit at jump node {j} (t = {t})"),
                });
            }
            let before = moment(left_view, p_ord)?;
            let mu_left: MeasureArg<'_> = match mean_field {
                MeanFieldMode::Frozen(flow) => flow.left_measure_at(j).ok_or_else(|| {
                    CoreError::GridMismatch(format!("frozen flow has no left limit at node {j}"))
                })?,
                MeanFieldMode::SelfConsistent => MeasureArg {
                    cloud: left_view,
                    mean: &left_stats.mean,
                    second_moment: left_stats.second_moment,
                },
            };
            exec.for_each_particle(
                dim,
                &mut states,
                &mut rngs,
                &mut acc,
                || StepScratch::new(dim, dn),
                |_i, x, _r, _a, s| {
                    coeffs.jump(t, x, &mu_left, &mark, &mut s.gamma);
                    for d in 0..dim {
                        x[d] += s.gamma[d];
                    }
                },
            );
            let after = moment(CloudView { dim, points: &states, weights: &weights }, p_ord)?;
            let bound = (growth.powf(p_ord) * (1.0 + before.powf(p_ord))).powf(1.0 / p_ord);
            if after > bound * (1.0 + 1e-9) {
                diagnostics.moment_violations += 1;
            }
            diagnostics.jump_moments.push(JumpMomentRecord { time: t, before, after, bound });

            jumps_done += 1;
            last_jump_time = t;
            kernel = law.kernel_for(jumps_done, last_jump_time);
            visit_base = law.state_index(jumps_done, last_jump_time) * kernel_cells;

            if flags.store_traj {
                ens_jump_nodes.push(j);
                ens_left.extend_from_slice(&left_copy);
            }
            if flags.store_flow {
                flow_jumps.push(FlowJump { node: j, left_points: left_copy, left_stats });
            }
        }

        // 2. Checkpoint at the first node of each kernel time cell.
        if ckpt_cursor < ckpt_nodes.len() && ckpt_nodes[ckpt_cursor] == j {
            ckpt_cursor += 1;
            checkpoints.push(SimCheckpoint {
                node: j,
                states: states.clone(),
                rngs: rngs.clone(),
                prefix_cost: acc.clone(),
            });
        }

        // 3. Record the node and assemble the mean-field argument.
        if flags.store_flow {
            flow_data[j * block..(j + 1) * block].copy_from_slice(&states);
        }
        if flags.store_traj {
            traj_data[j * block..(j + 1) * block].copy_from_slice(&states);
        }
        let stats_slot;
        let (mu_cloud, mu_stats): (CloudView<'_>, &NodeStats) = match mean_field {
            MeanFieldMode::Frozen(flow) => (flow.cloud_at(j), flow.stats_at(j)),
            MeanFieldMode::SelfConsistent => {
                let points: &[f64] = if flags.store_flow {
                    &flow_data[j * block..(j + 1) * block]
                } else {
                    mu_buffer.copy_from_slice(&states);
                    &mu_buffer[..]
                };
                let view = CloudView { dim, points, weights: &weights };
                stats_slot = NodeStats::of(view);
                (view, &stats_slot)
            }
        };
        if !mu_stats.mean.iter().all(|m| m.is_finite()) || !mu_stats.second_moment.is_finite() {
            return Err(CoreError::NonFinite {
                source_name: "particle cloud".into(),
                detail: format!("node {j} (t = {t})"),
            });
        }
        let mu = MeasureArg {
            cloud: mu_cloud,
            mean: &mu_stats.mean,
            second_moment: mu_stats.second_moment,
        };

        let tc = kernel.time_cell(t);
        for xi in states.chunks(dim) {
            diagnostics.visits[visit_base + tc * n_space + kernel.space_cell(xi)] += 1;
        }

        // 4. Relaxed running cost at this node, then one Euler-Maruyama step.
        let stepping = j + 1 < n_nodes;
        let dt_j = if stepping { grid.times[j + 1] - t } else { 0.0 };
        let sdt = dt_j.sqrt();
        let wt = wts[j];
        let kern = kernel;
        exec.for_each_particle(
            dim,
            &mut states,
            &mut rngs,
            &mut acc,
            || StepScratch::new(dim, dn),
            |_i, x, r, a, s| {
                let sc = kern.space_cell(x);
                let dist = kern.cell(tc, sc);
                let mut fbar = 0.0;
                for &(ix, pq) in &dist.entries {
                    fbar += pq * coeffs.running_cost(t, x, &mu, kern.control_point(ix as usize));
                }
                *a += wt * fbar;
                if stepping {
                    let u = kern.control_point(dist.sample(r));
                    coeffs.drift(t, x, &mu, u, &mut s.drift);
                    coeffs.diffusion(t, x, &mu, u, &mut s.diff);
                    for c in 0..dn {
                        let z: f64 = StandardNormal.sample(r);
                        s.normals[c] = z;
                    }
                    for d0 in 0..dim {
                        let mut g = 0.0;
                        for c in 0..dn {
                            g += s.diff[d0 * dn + c] * s.normals[c];
                        }
                        x[d0] += s.drift[d0] * dt_j + sdt * g;
                    }
                }
            },
        );
        if stepping {
            diagnostics.n_steps += 1;
        }
    }

    if states.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite {
            source_name: "particle state".into(),
            detail: "final node".into(),
        });
    }
    let mean_cost = acc.iter().sum::<f64>() / n as f64;
    let var = acc.iter().map(|c| (c - mean_cost) * (c - mean_cost)).sum::<f64>() / n as f64;
    let cost = CostEstimate { mean: mean_cost, se: (var / n as f64).sqrt() };
    if !cost.mean.is_finite() {
        return Err(CoreError::NonFinite {
            source_name: "running cost".into(),
            detail: "accumulated per-particle cost".into(),
        });
    }

    let flow = if flags.store_flow {
        Some(MeasureFlow::from_parts(
            grid.times.clone(),
            dim,
            weights.clone(),
            flow_data,
            flow_jumps,
        )?)
    } else {
        None
    };
    let ensemble = if flags.store_traj {
        Some(PathEnsemble::new(
            grid.times.clone(),
            dim,
            n,
            traj_data,
            ens_jump_nodes,
            ens_left,
        )?)
    } else {
        None
    };

    Ok(SimOutput {
        grid: grid.clone(),
        flow,
        ensemble,
        cost,
        per_particle_cost: acc,
        final_states: states,
        checkpoints,
        diagnostics,
    })
}

/// Simulate the interacting particle system along one frozen point path
/// from the initial law, under a control law.
pub fn propagate_fp<L: ControlLaw + ?Sized>(
    problem: &Problem,
    path: &PointPath,
    law: &L,
    mean_field: MeanFieldMode<'_>,
    opts: &SimOptions,
    exec: &Exec,
) -> Result<SimOutput> {
    let grid = SimGrid::build(opts.dt, path)?;
    run_particles(
        problem,
        &grid,
        path,
        law,
        mean_field,
        opts.n_particles,
        Start::Fresh {
            init_seed: opts.streams.init_seed,
            noise_seed: opts.streams.noise_seed,
        },
        &RunFlags {
            store_flow: opts.store_flow,
            store_traj: opts.store_trajectories,
            checkpoints: opts.record_checkpoints,
        },
        exec,
    )
}

/// Simulate over the sub-span `(t0, t1]` of `path` starting from given
/// particle states at `t0` (e.g. a post-jump configuration).
pub fn propagate_from_states<L: ControlLaw + ?Sized>(
    problem: &Problem,
    path: &PointPath,
    span: (f64, f64),
    states: Vec<f64>,
    law: &L,
    mean_field: MeanFieldMode<'_>,
    opts: &SimOptions,
    exec: &Exec,
) -> Result<SimOutput> {
    if states.len() != opts.n_particles * problem.dim_state {
        return Err(CoreError::DimensionMismatch(format!(
            "{} start values for {} particles",
            states.len(),
            opts.n_particles
        )));
    }
    let grid = SimGrid::build_segment(opts.dt, span.0, span.1, path)?;
    run_particles(
        problem,
        &grid,
        path,
        law,
        mean_field,
        opts.n_particles,
        Start::Given { states, noise_seed: opts.streams.noise_seed },
        &RunFlags {
            store_flow: opts.store_flow,
            store_traj: opts.store_trajectories,
            checkpoints: opts.record_checkpoints,
        },
        exec,
    )
}

/// Apply the jump response pointwise to a cloud against an explicit
/// pre-jump measure argument. Weights carry over unchanged.
pub fn apply_jump(
    problem: &Problem,
    time: f64,
    cloud: CloudView<'_>,
    mu: &MeasureArg<'_>,
    mark: &[f64],
) -> Result<ParticleCloud> {
    let dim = problem.dim_state;
    if cloud.dim != dim || mu.cloud.dim != dim {
        return Err(CoreError::DimensionMismatch(format!(
            "cloud dim {} vs state dim {dim}",
            cloud.dim
        )));
    }
    let mut gamma = vec![0.0; dim];
    let mut points = cloud.points.to_vec();
    for x in points.chunks_mut(dim) {
        problem.coeffs.jump(time, x, mu, mark, &mut gamma);
        for d in 0..dim {
            x[d] += gamma[d];
        }
    }
    ParticleCloud::new(dim, points, cloud.weights.to_vec())
}

/// [`apply_jump`] with the cloud's own empirical law as the measure
/// argument (the self-consistent system jump).
pub fn apply_jump_self(
    problem: &Problem,
    time: f64,
    cloud: CloudView<'_>,
    mark: &[f64],
) -> Result<ParticleCloud> {
    let stats = NodeStats::of(cloud);
    let mu = MeasureArg { cloud, mean: &stats.mean, second_moment: stats.second_moment };
    apply_jump(problem, time, cloud, &mu, mark)
}

/// A cadlag ensemble split into its continuous motion and the accumulated
/// jump increments, so that state = continuous + sum of increments so far.
#[derive(Clone, Debug)]
pub struct ContinuousDecomposition {
    /// Same grid, no jump nodes; continuous across the original jump times.
    pub continuous: PathEnsemble,
    pub jump_nodes: Vec<usize>,
    /// jumps x particles x dim realized increments.
    pub increments: Vec<f64>,
}

/// Subtract the running sum of jump increments from every trajectory. The
/// inverse is [`ContinuousDecomposition::reconstruct`].
pub fn extract_continuous_part(ensemble: &PathEnsemble) -> Result<ContinuousDecomposition> {
    let dim = ensemble.dim;
    let n = ensemble.n_particles();
    let block = n * dim;
    let jump_nodes = ensemble.jump_nodes().to_vec();
    let mut increments = vec![0.0; jump_nodes.len() * block];
    for (k, &node) in jump_nodes.iter().enumerate() {
        let right = ensemble.states_at(node);
        let left = ensemble.left_states(k);
        for (inc, (r, l)) in increments[k * block..(k + 1) * block]
            .iter_mut()
            .zip(right.iter().zip(left))
        {
            *inc = r - l;
        }
    }
    let mut data = Vec::with_capacity(ensemble.n_nodes() * block);
    let mut offset = vec![0.0; block];
    let mut cursor = 0usize;
    for j in 0..ensemble.n_nodes() {
        if cursor < jump_nodes.len() && jump_nodes[cursor] == j {
            for (o, inc) in offset.iter_mut().zip(&increments[cursor * block..(cursor + 1) * block])
            {
                *o += inc;
            }
            cursor += 1;
        }
        data.extend(ensemble.states_at(j).iter().zip(&offset).map(|(x, o)| x - o));
    }
    let continuous =
        PathEnsemble::new(ensemble.times.clone(), dim, n, data, Vec::new(), Vec::new())?;
    Ok(ContinuousDecomposition { continuous, jump_nodes, increments })
}

impl ContinuousDecomposition {
    /// Add the increments back; round-trips [`extract_continuous_part`] to
    /// floating-point cancellation accuracy.
    pub fn reconstruct(&self) -> Result<PathEnsemble> {
        let dim = self.continuous.dim;
        let n = self.continuous.n_particles();
        let block = n * dim;
        let mut data = Vec::with_capacity(self.continuous.n_nodes() * block);
        let mut left_data = Vec::with_capacity(self.jump_nodes.len() * block);
        let mut offset = vec![0.0; block];
        let mut cursor = 0usize;
        for j in 0..self.continuous.n_nodes() {
            let y = self.continuous.states_at(j);
            if cursor < self.jump_nodes.len() && self.jump_nodes[cursor] == j {
                left_data.extend(y.iter().zip(&offset).map(|(v, o)| v + o));
                for (o, inc) in offset
                    .iter_mut()
                    .zip(&self.increments[cursor * block..(cursor + 1) * block])
                {
                    *o += inc;
                }
                cursor += 1;
            }
            data.extend(y.iter().zip(&offset).map(|(v, o)| v + o));
        }
        PathEnsemble::new(
            self.continuous.times.clone(),
            dim,
            n,
            data,
            self.jump_nodes.clone(),
            left_data,
        )
    }
}

/// Splice a continuation onto a pre-jump segment across one jump.
///
/// `head` must end at the jump time with *left-limit* states (its last node
/// is the state just before the jump). The jump map is applied against the
/// head's own final empirical law with the given `mark`; `tail_gen` then
/// receives the post-jump states and must return an ensemble starting at
/// the jump time from exactly those states — anything that disagrees by
/// more than `1e-10` in any coordinate is rejected as a jump-condition
/// violation.
pub fn concatenate<F>(
    problem: &Problem,
    mark: &[f64],
    head: &PathEnsemble,
    tail_gen: F,
) -> Result<PathEnsemble>
where
    F: FnOnce(&[f64]) -> Result<PathEnsemble>,
{
    let dim = head.dim;
    let n = head.n_particles();
    let block = n * dim;
    let last = head.n_nodes() - 1;
    let t_mid = head.times[last];
    if head.jump_nodes().contains(&last) {
        return Err(CoreError::GridMismatch(
            "head already ends with a jump at the splice time".into(),
        ));
    }
    let weights = vec![1.0 / n as f64; n];
    let left_view = CloudView { dim, points: head.states_at(last), weights: &weights };
    let post = apply_jump_self(problem, t_mid, left_view, mark)?;

    let tail = tail_gen(&post.points)?;
    if tail.dim != dim || tail.n_particles() != n {
        return Err(CoreError::DimensionMismatch("tail shape differs from head".into()));
    }
    if (tail.times[0] - t_mid).abs() > 1e-12 * (1.0 + t_mid.abs()) {
        return Err(CoreError::GridMismatch(format!(
            "tail starts at {} but the jump is at {t_mid}",
            tail.times[0]
        )));
    }
    let gap = tail
        .states_at(0)
        .iter()
        .zip(&post.points)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if gap > 1e-10 {
        return Err(CoreError::JumpCondition { time: t_mid, gap });
    }

    let mut times = head.times.clone();
    times.extend_from_slice(&tail.times[1..]);
    let mut data = Vec::with_capacity(times.len() * block);
    for j in 0..last {
        data.extend_from_slice(head.states_at(j));
    }
    // the splice node carries the post-jump states; the head's final states
    // become its left limit
    data.extend_from_slice(tail.states_at(0));
    for j in 1..tail.n_nodes() {
        data.extend_from_slice(tail.states_at(j));
    }
    let mut jump_nodes: Vec<usize> = head.jump_nodes().to_vec();
    let mut left_data = head.left_data.clone();
    jump_nodes.push(last);
    left_data.extend_from_slice(head.states_at(last));
    for (k, &node) in tail.jump_nodes().iter().enumerate() {
        jump_nodes.push(last + node);
        left_data.extend_from_slice(tail.left_states(k));
    }
    PathEnsemble::new(times, dim, n, data, jump_nodes, left_data)
}

/// Realized outcome of the system along one common-noise path.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathRunSummary {
    pub path_index: usize,
    pub jump_count: usize,
    pub cost: CostEstimate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommonNoiseOutput {
    pub per_path: Vec<PathRunSummary>,
    /// Mean of per-path realized costs: the Monte-Carlo value of the law.
    pub value: f64,
    /// Standard error of `value` across paths (per-path noise included).
    pub se: f64,
}

/// Run the self-consistent system under one control law along a batch of
/// common-noise paths and average the realized costs. Each path gets its
/// own derived substream family, so the batch is deterministic in
/// `(options, paths)` and re-running with a different law reuses identical
/// noise — a common-random-number comparison.
pub fn simulate_common_noise_system<L: ControlLaw + ?Sized>(
    problem: &Problem,
    law: &L,
    paths: &[PointPath],
    opts: &SimOptions,
    exec: &Exec,
) -> Result<CommonNoiseOutput> {
    if paths.is_empty() {
        return Err(CoreError::InvalidConfig("no common-noise paths supplied".into()));
    }
    let run_one = |k: usize| -> Result<PathRunSummary> {
        let streams = opts.streams.for_path(k);
        let grid = SimGrid::build(opts.dt, &paths[k])?;
        let out = run_particles(
            problem,
            &grid,
            &paths[k],
            law,
            MeanFieldMode::SelfConsistent,
            opts.n_particles,
            Start::Fresh { init_seed: streams.init_seed, noise_seed: streams.noise_seed },
            &RunFlags { store_flow: false, store_traj: false, checkpoints: false },
            exec,
        )?;
        Ok(PathRunSummary {
            path_index: k,
            jump_count: paths[k].jump_count(),
            cost: out.cost,
        })
    };
    // Parallelize across paths when the per-path runs are too small to
    // split internally; both schedules give identical results.
    let results: Vec<Result<PathRunSummary>> =
        if opts.n_particles <= PARTICLE_CHUNK && paths.len() > 1 {
            exec.map_collect(paths.len(), run_one)
        } else {
            (0..paths.len()).map(run_one).collect()
        };
    let per_path = results.into_iter().collect::<Result<Vec<_>>>()?;
    let k = per_path.len();
    let value = per_path.iter().map(|r| r.cost.mean).sum::<f64>() / k as f64;
    let se = if k > 1 {
        (per_path.iter().map(|r| (r.cost.mean - value) * (r.cost.mean - value)).sum::<f64>()
            / (k as f64 * (k - 1) as f64))
            .sqrt()
    } else {
        per_path[0].cost.se
    };
    Ok(CommonNoiseOutput { per_path, value, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CellDist, KernelLayout};
    use crate::model::{make_lq_problem, LqParams};
    use crate::noise::PointEvent;
    use approx::assert_relative_eq;

    fn lq(params: LqParams) -> Problem {
        make_lq_problem(params).unwrap()
    }

    fn zero_control_kernel(p: &Problem, jump_times: &[f64]) -> ControlKernel {
        ControlKernel::dirac_midpoint(p, &KernelLayout::new(4, 6, 9), jump_times).unwrap()
    }

    fn one_jump_path(t: f64) -> PointPath {
        PointPath::new(1.0, vec![PointEvent { time: t, mark: vec![0.0] }]).unwrap()
    }

    #[test]
    fn grid_inserts_and_dedupes_jump_nodes() {
        let path = PointPath::new(
            1.0,
            vec![
                PointEvent { time: 0.3, mark: vec![0.0] },
                PointEvent { time: 0.5, mark: vec![0.0] }, // exactly a base node
            ],
        )
        .unwrap();
        let g = SimGrid::build(0.25, &path).unwrap();
        assert_eq!(g.times.len(), 6); // 5 base nodes + inserted 0.3
        assert!(g.times.windows(2).all(|w| w[1] > w[0]));
        assert!(g.times.windows(2).all(|w| w[1] - w[0] <= 0.25 + 1e-15));
        assert_eq!(g.jump_nodes.len(), 2);
        assert_eq!(g.times[g.jump_nodes[0].0], 0.3);
        assert_eq!(g.times[g.jump_nodes[1].0], 0.5);
        // weights integrate a constant exactly
        assert_relative_eq!(g.quad_weights().iter().sum::<f64>(), 1.0, max_relative = 1e-14);
        assert!(SimGrid::build(0.0, &path).is_err());
        assert!(SimGrid::build_segment(0.1, 0.5, 0.5, &path).is_err());
    }

    #[test]
    fn deterministic_exponential_growth_and_cost() {
        let p = lq(LqParams { sigma: 0.0, initial_std: 0.0, ..LqParams::default() });
        let path = PointPath::empty(1.0);
        let kernel = zero_control_kernel(&p, &[]);
        let opts = SimOptions::new(3, 1.0 / 1024.0, 7);
        let out =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &Exec::sequential())
                .unwrap();
        let target = (0.5f64).exp(); // x0 = 1, drift a = 0.5, horizon 1
        for x in &out.final_states {
            assert_relative_eq!(*x, target, max_relative = 1e-3);
        }
        // integral of q x(t)^2 dt = (e^{2a} - 1) / (2a) with q = 1
        let cost_target = (1.0f64.exp() - 1.0) / 1.0;
        assert_relative_eq!(out.cost.mean, cost_target, max_relative = 2e-3);
        assert_eq!(out.cost.se, 0.0); // identical particles
        assert_eq!(out.diagnostics.jump_moments.len(), 0);
        assert_eq!(
            out.diagnostics.visits.iter().sum::<u64>(),
            3 * out.grid.n_nodes() as u64
        );
    }

    #[test]
    fn one_jump_scales_the_deterministic_state() {
        let p = lq(LqParams { sigma: 0.0, initial_std: 0.0, ..LqParams::default() });
        let path = one_jump_path(0.4);
        let kernel = zero_control_kernel(&p, &[0.4]);
        let opts = SimOptions::new(2, 1.0 / 1024.0, 7);
        let out =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &Exec::sequential())
                .unwrap();
        let target = 1.1 * (0.5f64).exp(); // jump multiplies by (1 + c), c = 0.1
        assert_relative_eq!(out.final_states[0], target, max_relative = 1e-3);
        let flow = out.flow.as_ref().unwrap();
        assert_eq!(flow.jumps().len(), 1);
        let jn = flow.jumps()[0].node;
        assert_eq!(flow.times[jn], 0.4);
        assert_relative_eq!(
            flow.jumps()[0].left_stats.mean[0],
            (0.2f64).exp(),
            max_relative = 1e-3
        );
        // post-jump node value = 1.1 x left limit
        assert_relative_eq!(
            flow.stats_at(jn).mean[0],
            1.1 * flow.jumps()[0].left_stats.mean[0],
            max_relative = 1e-12
        );
        assert_eq!(out.diagnostics.jump_moments.len(), 1);
        assert_eq!(out.diagnostics.moment_violations, 0);
    }

    #[test]
    fn noisy_mean_matches_the_moment_oracle() {
        let p = lq(LqParams::default()); // sigma 0.2, initial N(1, 0.3^2)
        let path = one_jump_path(0.4);
        let kernel = zero_control_kernel(&p, &[0.4]);
        let opts = SimOptions::new(4000, 1.0 / 128.0, 21);
        let out =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &Exec::sequential())
                .unwrap();
        let n = out.final_states.len() as f64;
        let mean = out.final_states.iter().sum::<f64>() / n;
        let sd = (out.final_states.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let target = 1.1 * (0.5f64).exp();
        assert!(
            (mean - target).abs() <= 3.0 * sd / n.sqrt() + 2e-3,
            "mean {mean} vs oracle {target} (3 se = {})",
            3.0 * sd / n.sqrt()
        );
        assert!(out.cost.se > 0.0);
    }

    #[test]
    fn frozen_flow_reproduces_the_self_consistent_run_bitwise() {
        let p = lq(LqParams { mean_coupling: 0.3, ..LqParams::default() });
        let path = one_jump_path(0.6);
        let kernel = zero_control_kernel(&p, &[0.6]);
        let opts = SimOptions::new(300, 1.0 / 64.0, 33);
        let exec = Exec::sequential();
        let run1 =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &exec).unwrap();
        let flow = run1.flow.as_ref().unwrap();
        let mut opts2 = opts.clone();
        opts2.store_flow = false;
        let run2 =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::Frozen(flow), &opts2, &exec).unwrap();
        assert_eq!(run1.final_states, run2.final_states);
        assert_eq!(run1.cost.mean, run2.cost.mean);
        assert_eq!(run1.per_particle_cost, run2.per_particle_cost);
    }

    #[test]
    fn checkpoint_resume_is_bitwise_exact() {
        let p = lq(LqParams { mean_coupling: 0.3, ..LqParams::default() });
        let path = one_jump_path(0.6);
        let kernel = zero_control_kernel(&p, &[0.6]);
        let mut opts = SimOptions::new(200, 1.0 / 64.0, 5);
        opts.record_checkpoints = true;
        opts.store_flow = false;
        let exec = Exec::sequential();
        let full =
            propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &exec).unwrap();
        assert_eq!(full.checkpoints.len(), kernel.n_time_cells()); // one per cell, incl. jump-refined
        for ck in &full.checkpoints[1..] {
            let resumed = run_particles(
                &p,
                &full.grid,
                &path,
                &kernel,
                MeanFieldMode::SelfConsistent,
                200,
                Start::Resume(ck),
                &RunFlags { store_flow: false, store_traj: false, checkpoints: false },
                &exec,
            )
            .unwrap();
            assert_eq!(full.final_states, resumed.final_states, "resume at node {}", ck.node);
            assert_eq!(full.per_particle_cost, resumed.per_particle_cost);
        }
    }

    #[test]
    fn concatenation_equals_direct_simulation_exactly() {
        let p = lq(LqParams { sigma: 0.0, initial_std: 0.0, ..LqParams::default() });
        let path = one_jump_path(0.5);
        let kernel = zero_control_kernel(&p, &[0.5]);
        let exec = Exec::sequential();
        let mut opts = SimOptions::new(4, 1.0 / 16.0, 9);
        opts.store_trajectories = true;
        let full = propagate_fp(&p, &path, &kernel, MeanFieldMode::SelfConsistent, &opts, &exec)
            .unwrap();
        let full_ens = full.ensemble.unwrap();

        // head: same dynamics on [0, 0.5] with the jump excluded
        let head_path = PointPath::empty(0.5);
        let mut hopts = opts.clone();
        hopts.dt = 1.0 / 16.0;
        let head = propagate_fp(&p, &head_path, &kernel, MeanFieldMode::SelfConsistent, &hopts, &exec)
            .unwrap()
            .ensemble
            .unwrap();

        let glued = concatenate(&p, &[0.0], &head, |starts| {
            let out = propagate_from_states(
                &p,
                &path,
                (0.5, 1.0),
                starts.to_vec(),
                &kernel,
                MeanFieldMode::SelfConsistent,
                &opts,
                &exec,
            )?;
            Ok(out.ensemble.unwrap())
        })
        .unwrap();

        assert_eq!(glued.times, full_ens.times);
        assert_eq!(glued.jump_nodes(), full_ens.jump_nodes());
        for j in 0..glued.n_nodes() {
            for (a, b) in glued.states_at(j).iter().zip(full_ens.states_at(j)) {
                assert!((a - b).abs() <= 1e-13, "node {j}: {a} vs {b}");
            }
        }
        for (a, b) in glued.left_states(0).iter().zip(full_ens.left_states(0)) {
            assert!((a - b).abs() <= 1e-13);
        }

        // a tail started from the wrong post-jump state is rejected
        let err = concatenate(&p, &[0.0], &head, |starts| {
            let mut wrong = starts.to_vec();
            for w in &mut wrong {
                *w += 1e-3;
            }
            let out = propagate_from_states(
                &p,
                &path,
                (0.5, 1.0),
                wrong,
                &kernel,
                MeanFieldMode::SelfConsistent,
                &opts,
                &exec,
            )?;
            Ok(out.ensemble.unwrap())
        });
        assert!(matches!(err, Err(CoreError::JumpCondition { .. })), "{err:?}");
    }

    #[test]
    fn continuous_part_roundtrip_and_continuity() {
        let p = lq(LqParams::default());
        let path = PointPath::new(
            1.0,
            vec![
                PointEvent { time: 0.3, mark: vec![0.0] },
                PointEvent { time: 0.7, mark: vec![0.0] },
            ],
        )
        .unwrap();
        let kernel = zero_control_kernel(&p, &[0.3, 0.7]);
        let mut opts = SimOptions::new(50, 1.0 / 32.0, 13);
        opts.store_trajectories = true;
        let ens = propagate_fp(
            &p,
            &path,
            &kernel,
            MeanFieldMode::SelfConsistent,
            &opts,
            &Exec::sequential(),
        )
        .unwrap()
        .ensemble
        .unwrap();
        let dec = extract_continuous_part(&ens).unwrap();
        assert!(dec.continuous.jump_nodes().is_empty());
        let rec = dec.reconstruct().unwrap();
        assert_eq!(rec.jump_nodes(), ens.jump_nodes());
        for j in 0..ens.n_nodes() {
            for (a, b) in rec.states_at(j).iter().zip(ens.states_at(j)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        for k in 0..2 {
            for (a, b) in rec.left_states(k).iter().zip(ens.left_states(k)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn history_policy_switches_kernels_at_jumps() {
        // a = 0, sigma = 0, q = 0: state moves only through the control
        let p = lq(LqParams {
            drift_a: 0.0,
            sigma: 0.0,
            initial_std: 0.0,
            cost_q: 0.0,
            ..LqParams::default()
        });
        let layout = KernelLayout::new(2, 2, 9);
        let before = ControlKernel::dirac_midpoint(&p, &layout, &[]).unwrap();
        let mut after = before.clone();
        // control grid spans [-20, 20] in 9 points; index 6 is +10
        for tc in 0..after.n_time_cells() {
            for sc in 0..after.n_space_cells() {
                after.set_cell(tc, sc, CellDist::dirac(6));
            }
        }
        let u_after = after.control_point(6)[0];
        let policy = JumpHistoryPolicy::new(1, vec![0.0, 1.0], vec![before, after]).unwrap();
        let path = one_jump_path(0.5);
        assert_eq!(policy.states_visited(&path), vec![0, 1]);
        assert_eq!(policy.states_visited(&PointPath::empty(1.0)), vec![0]);

        let opts = SimOptions::new(2, 1.0 / 64.0, 3);
        let out = propagate_fp(
            &p,
            &path,
            &policy,
            MeanFieldMode::SelfConsistent,
            &opts,
            &Exec::sequential(),
        )
        .unwrap();
        // x = 1 until the jump, 1.1 after it, then slope g u = u_after
        let target = 1.1 + u_after * 0.5;
        assert_relative_eq!(out.final_states[0], target, max_relative = 1e-9);
        // both history states were exercised
        let cells = policy.kernels[0].n_cells();
        let s0: u64 = out.diagnostics.visits[..cells].iter().sum();
        let s1: u64 = out.diagnostics.visits[cells..].iter().sum();
        assert!(s0 > 0 && s1 > 0);
    }

    #[test]
    fn common_noise_batch_matches_manual_runs() {
        let p = lq(LqParams::default());
        let paths = vec![PointPath::empty(1.0), one_jump_path(0.6)];
        let kernel = zero_control_kernel(&p, &[]);
        let opts = SimOptions::new(64, 1.0 / 32.0, 17);
        let exec = Exec::sequential();
        let batch = simulate_common_noise_system(&p, &kernel, &paths, &opts, &exec).unwrap();
        assert_eq!(batch.per_path.len(), 2);
        assert_eq!(batch.per_path[1].jump_count, 1);
        for k in 0..2 {
            let streams = opts.streams.for_path(k);
            let mut o = opts.clone();
            o.streams = streams;
            o.store_flow = false;
            let manual =
                propagate_fp(&p, &paths[k], &kernel, MeanFieldMode::SelfConsistent, &o, &exec)
                    .unwrap();
            assert_eq!(batch.per_path[k].cost.mean, manual.cost.mean);
        }
        assert_relative_eq!(
            batch.value,
            0.5 * (batch.per_path[0].cost.mean + batch.per_path[1].cost.mean),
            max_relative = 1e-15
        );
    }
}
