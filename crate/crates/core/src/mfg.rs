//! Mean-field game engine on frozen point paths.
//!
//! For one frozen jump path the equilibrium is a fixed point: a population
//! flow `m` and a kernel that best-responds to `m` while regenerating `m`
//! when the whole population plays it. [`solve_pathwise_mfe`] runs a damped
//! Picard iteration between the two, with every simulation on common random
//! numbers so the iteration becomes a deterministic map whose residual can
//! genuinely reach zero. [`assemble_strong_mfe`] repeats this across a batch
//! of sampled paths and certifies the result by convergence fraction,
//! per-path exploitability, and an independent higher-resolution
//! re-simulation of the consistency condition.

use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_fp, CostEstimate, MeanFieldMode, SimOptions, StreamPlan};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::kernel::{ControlKernel, KernelLayout};
use crate::measures::{wasserstein2, MeasureFlow};
use crate::model::Problem;
use crate::noise::{sample_point_paths, PointPath};
use crate::optimizer::{optimize_pathwise, paired_diff, OptimizedControl, OptimizerOptions};
use crate::rng::{self, tag};

/// Single-agent optimal control against a frozen population flow.
pub fn best_response(
    problem: &Problem,
    path: &PointPath,
    flow: &MeasureFlow,
    opts: &OptimizerOptions,
    exec: &Exec,
) -> Result<OptimizedControl> {
    optimize_pathwise(problem, path, MeanFieldMode::Frozen(flow), opts, exec)
}

#[derive(Clone, Debug)]
pub struct MfeOptions {
    pub layout: KernelLayout,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Picard iteration cap.
    pub max_iters: usize,
    /// Fraction of the particle population refreshed from the new flow per
    /// iteration, in `(0, 1]`; `1` is the undamped iteration.
    pub damping: f64,
    /// Convergence threshold on the sup-over-nodes Wasserstein-2 distance
    /// between the flow the population would regenerate and the current one.
    pub tol_w2: f64,
    /// Descent sweeps per best-response call.
    pub max_sweeps: usize,
    /// Random restarts for the first best response and for the final
    /// exploitability search; later iterations descend from the warm kernel.
    pub n_restarts: usize,
}

impl MfeOptions {
    pub fn new(layout: KernelLayout, n_particles: usize, dt: f64, seed: u64) -> Self {
        Self {
            layout,
            n_particles,
            dt,
            seed,
            max_iters: 25,
            damping: 0.5,
            tol_w2: 0.02,
            max_sweeps: 4,
            n_restarts: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MfeResult {
    pub kernel: ControlKernel,
    /// Equilibrium population flow (the regenerated flow once converged).
    pub flow: MeasureFlow,
    /// Consistency residual per Picard iteration.
    pub residual_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Representative-agent cost against the equilibrium flow, on fresh
    /// evaluation streams.
    pub value: CostEstimate,
    /// `J(equilibrium kernel) - J(best found deviation)` against the frozen
    /// equilibrium flow, paired on the evaluation streams. Nonnegative up to
    /// Monte-Carlo noise when the iteration truly converged; a clearly
    /// positive value certifies a profitable deviation exists.
    pub exploitability: f64,
    pub exploitability_se: f64,
}

fn sup_node_w2(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64> {
    let mut worst = 0.0f64;
    for j in 0..a.n_nodes() {
        worst = worst.max(wasserstein2(a.cloud_at(j), b.cloud_at(j))?);
    }
    Ok(worst)
}

/// Damped Picard iteration for the pathwise mean-field equilibrium.
///
/// All population simulations share one stream plan, so once the kernel
/// stops changing the regenerated flow is bit-identical between iterations;
/// the damping window rotates through the particle indices, so a stationary
/// kernel flushes the whole mixture within `1/damping` iterations and the
/// residual genuinely reaches zero instead of plateauing at sampling noise.
pub fn solve_pathwise_mfe(
    problem: &Problem,
    path: &PointPath,
    opts: &MfeOptions,
    exec: &Exec,
) -> Result<MfeResult> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "Picard damping {} outside (0, 1]",
            opts.damping
        )));
    }
    if opts.max_iters == 0 || opts.n_particles == 0 {
        return Err(CoreError::InvalidConfig("need at least one iteration and particle".into()));
    }
    let mut sim = SimOptions::new(opts.n_particles, opts.dt, rng::derive_seed(opts.seed, tag::MFE, &[0]));
    sim.store_flow = true;

    let mut kernel = ControlKernel::dirac_midpoint(problem, &opts.layout, &path.jump_times())?;
    let mut flow = propagate_fp(problem, path, &kernel, MeanFieldMode::SelfConsistent, &sim, exec)?
        .flow
        .expect("flow stored");
    let take = ((opts.damping * opts.n_particles as f64).ceil() as usize).clamp(1, opts.n_particles);
    let br_seed = rng::derive_seed(opts.seed, tag::MFE, &[1]);

    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it + 1;
        let mut bo = OptimizerOptions::new(opts.layout.clone(), opts.n_particles, opts.dt, br_seed);
        bo.max_sweeps = opts.max_sweeps;
        bo.store_flow = false;
        bo.warm_start = Some(kernel);
        if it == 0 {
            bo.n_restarts = opts.n_restarts;
        } else {
            bo.n_restarts = 0;
            bo.warm_only = true;
        }
        kernel = best_response(problem, path, &flow, &bo, exec)?.kernel;
        let regenerated =
            propagate_fp(problem, path, &kernel, MeanFieldMode::SelfConsistent, &sim, exec)?
                .flow
                .expect("flow stored");
        let residual = sup_node_w2(&regenerated, &flow)?;
        residual_history.push(residual);
        if residual <= opts.tol_w2 {
            flow = regenerated;
            converged = true;
            break;
        }
        flow = flow.splice(&regenerated, it * take, take)?;
    }

    // Evaluation on fresh streams, shared between the equilibrium kernel and
    // the deviation search so the exploitability gap is paired.
    let mut ev = SimOptions::new(opts.n_particles, opts.dt, 0);
    ev.streams = StreamPlan {
        init_seed: rng::derive_seed(opts.seed, tag::MFE, &[2]),
        noise_seed: rng::derive_seed(opts.seed, tag::MFE, &[3]),
    };
    ev.store_flow = false;
    let eq_run = propagate_fp(problem, path, &kernel, MeanFieldMode::Frozen(&flow), &ev, exec)?;

    let mut xo = OptimizerOptions::new(
        opts.layout.clone(),
        opts.n_particles,
        opts.dt,
        rng::derive_seed(opts.seed, tag::MFE, &[4]),
    );
    xo.max_sweeps = opts.max_sweeps;
    xo.n_restarts = opts.n_restarts;
    xo.store_flow = false;
    xo.warm_start = Some(kernel.clone());
    let deviation = best_response(problem, path, &flow, &xo, exec)?;
    let dev_run =
        propagate_fp(problem, path, &deviation.kernel, MeanFieldMode::Frozen(&flow), &ev, exec)?;
    let (exploitability, exploitability_se) =
        paired_diff(&eq_run.per_particle_cost, &dev_run.per_particle_cost);

    Ok(MfeResult {
        kernel,
        flow,
        residual_history,
        iterations,
        converged,
        value: eq_run.cost,
        exploitability,
        exploitability_se,
    })
}

#[derive(Clone, Debug)]
pub struct StrongMfeOptions {
    pub n_paths: usize,
    pub seed: u64,
    pub mfe: MfeOptions,
    /// Particle count for the independent consistency re-simulation.
    pub resim_particles: usize,
    /// Acceptance threshold on the re-simulated consistency distance.
    pub consistency_tol: f64,
    /// Minimum fraction of paths whose Picard iteration must converge.
    pub min_converged_frac: f64,
}

impl StrongMfeOptions {
    pub fn new(n_paths: usize, seed: u64, mfe: MfeOptions) -> Self {
        Self {
            n_paths,
            seed,
            mfe,
            resim_particles: 4096,
            consistency_tol: 0.05,
            min_converged_frac: 0.9,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathMfeSummary {
    pub path_index: usize,
    pub jump_count: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub value: f64,
    pub value_se: f64,
    pub exploitability: f64,
    pub exploitability_se: f64,
    /// Sup-over-nodes distance between the equilibrium flow and a fresh
    /// higher-resolution population simulation of the final kernel.
    pub consistency_w2: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrongMfeEstimate {
    pub per_path: Vec<PathMfeSummary>,
    pub converged_frac: f64,
    /// Average equilibrium value across paths, with its between-path SE.
    pub value: f64,
    pub value_se: f64,
    pub max_exploitability: f64,
    /// Worst consistency distance among converged paths.
    pub max_consistency_w2: f64,
    /// Convergence fraction and consistency both within their thresholds.
    pub accepted: bool,
}

/// Solve the equilibrium on a batch of sampled point paths and certify it.
pub fn assemble_strong_mfe(
    problem: &Problem,
    opts: &StrongMfeOptions,
    exec: &Exec,
) -> Result<StrongMfeEstimate> {
    if opts.n_paths == 0 {
        return Err(CoreError::InvalidConfig("need at least one path".into()));
    }
    let paths = sample_point_paths(&problem.intensity, problem.horizon, opts.seed, opts.n_paths)?;
    let run_one = |k: usize| -> Result<PathMfeSummary> {
        let mut mo = opts.mfe.clone();
        mo.seed = rng::derive_seed(opts.seed, tag::MFE, &[k as u64]);
        let r = solve_pathwise_mfe(problem, &paths[k], &mo, exec)?;
        let mut rs = SimOptions::new(
            opts.resim_particles,
            mo.dt,
            rng::derive_seed(mo.seed, tag::RESIM, &[0]),
        );
        rs.store_flow = true;
        let resim =
            propagate_fp(problem, &paths[k], &r.kernel, MeanFieldMode::SelfConsistent, &rs, exec)?
                .flow
                .expect("flow stored");
        let mut consistency = 0.0f64;
        for j in 0..resim.n_nodes() {
            consistency =
                consistency.max(wasserstein2(resim.cloud_at(j), r.flow.cloud_at(j))?);
        }
        Ok(PathMfeSummary {
            path_index: k,
            jump_count: paths[k].jump_count(),
            converged: r.converged,
            iterations: r.iterations,
            final_residual: r.residual_history.last().copied().unwrap_or(f64::NAN),
            value: r.value.mean,
            value_se: r.value.se,
            exploitability: r.exploitability,
            exploitability_se: r.exploitability_se,
            consistency_w2: consistency,
        })
    };
    let results: Vec<Result<PathMfeSummary>> =
        if opts.mfe.n_particles <= crate::exec::PARTICLE_CHUNK && paths.len() > 1 {
            exec.map_collect(paths.len(), run_one)
        } else {
            (0..paths.len()).map(run_one).collect()
        };
    let per_path = results.into_iter().collect::<Result<Vec<_>>>()?;

    let k = per_path.len() as f64;
    let converged_frac = per_path.iter().filter(|p| p.converged).count() as f64 / k;
    let value = per_path.iter().map(|p| p.value).sum::<f64>() / k;
    let value_se = if per_path.len() > 1 {
        (per_path.iter().map(|p| (p.value - value) * (p.value - value)).sum::<f64>()
            / (k * (k - 1.0)))
            .sqrt()
    } else {
        per_path[0].value_se
    };
    let max_exploitability =
        per_path.iter().map(|p| p.exploitability).fold(f64::NEG_INFINITY, f64::max);
    let max_consistency_w2 = per_path
        .iter()
        .filter(|p| p.converged)
        .map(|p| p.consistency_w2)
        .fold(0.0f64, f64::max);
    let accepted = converged_frac >= opts.min_converged_frac
        && per_path.iter().any(|p| p.converged)
        && max_consistency_w2 <= opts.consistency_tol;

    Ok(StrongMfeEstimate {
        per_path,
        converged_frac,
        value,
        value_se,
        max_exploitability,
        max_consistency_w2,
        accepted,
    })
}
