//! Numerical verification suite.
//!
//! Each check simulates one structural claim about the pathwise system —
//! superposition of the particle flow, equivalence of the pathwise and
//! common-noise values, strict-vs-relaxed control equivalence, weak-form
//! Fokker-Planck residuals, per-jump moment recursion, and continuity of
//! the value in the initial law — and emits a [`VerificationReport`]: named
//! metrics with standard errors, refinement trends, and a pass flag that is
//! a pure function of the metrics against declared tolerances plus
//! *measured* refinement budgets (never a raw constant alone).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    propagate_fp, JumpHistoryPolicy, MeanFieldMode, SimOptions, StreamPlan,
};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::fmt::g17;
use crate::kernel::{ControlKernel, KernelLayout};
use crate::lq::solve_lq_backward;
use crate::measures::{moment, wasserstein2, MeasureFlow};
use crate::model::{LqParams, Problem, QuadraticTestFunction};
use crate::noise::{sample_point_paths, IntensitySpec, PointPath};
use crate::optimizer::{
    optimize_history_policy, optimize_pathwise, paired_diff, pathwise_value, OptimizerOptions,
    PolicyOptimizerOptions,
};
use crate::rng::{self, tag};

/// One metric at one refinement level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelMetric {
    pub label: String,
    pub value: f64,
    pub se: f64,
}

/// Machine-readable outcome of one check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check_name: String,
    /// Inputs digest: the configuration and seeds the check consumed.
    pub digest: String,
    pub metrics: BTreeMap<String, f64>,
    /// Metric values across refinement levels, coarsest first.
    pub levels: Vec<LevelMetric>,
    /// Informational notes (e.g. optimizer stalls); never affect `pass`.
    pub flags: Vec<String>,
    pub pass: bool,
}

impl VerificationReport {
    pub fn summary_line(&self) -> String {
        let mut parts: Vec<String> =
            self.metrics.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
        if !self.flags.is_empty() {
            parts.push(format!("flags={}", self.flags.len()));
        }
        format!(
            "{} {} {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check_name,
            parts.join(" ")
        )
    }

    /// `check,metric,value` rows (full precision) for a summary CSV.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .metrics
            .iter()
            .map(|(k, v)| format!("{},{},{}", self.check_name, k, g17(*v)))
            .collect();
        for l in &self.levels {
            rows.push(format!("{},level[{}],{}", self.check_name, l.label, g17(l.value)));
        }
        rows.push(format!("{},pass,{}", self.check_name, u8::from(self.pass)));
        rows
    }
}

fn metric_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

/// Closed-form reference available only for the linear-quadratic benchmarks
/// without mean coupling (with coupling the social cost is not the frozen
/// tracking problem this solver integrates).
fn lq_reference(problem: &Problem) -> Option<&LqParams> {
    problem.lq.as_ref().filter(|p| p.mean_coupling == 0.0)
}

fn lq_value_for_path(params: &LqParams, path: &PointPath, dt: f64) -> Result<f64> {
    let sol = solve_lq_backward(params, &path.jump_times(), None, dt)?;
    Ok(sol.value(params.initial_mean, params.initial_std * params.initial_std))
}

// ---------------------------------------------------------------------------
// Superposition: the empirical flow propagated self-consistently is
// reproduced by fresh trajectories driven against that flow frozen as the
// mean-field argument.
// ---------------------------------------------------------------------------

/// For each `(particles, dt)` level: run the self-consistent system once
/// recording its flow, then re-simulate fresh trajectories (same initial
/// particles, independent driving noise) against the frozen flow, and
/// report the max-over-nodes Wasserstein-2 distance between the two sets
/// of marginals. Passes when the metric decreases across levels and the
/// finest level is below `tolerance`.
pub fn check_superposition(
    problem: &Problem,
    path: &PointPath,
    kernel: &ControlKernel,
    levels: &[(usize, f64)],
    tolerance: f64,
    seed: u64,
    exec: &Exec,
) -> Result<VerificationReport> {
    if levels.is_empty() {
        return Err(CoreError::InvalidConfig("superposition check needs levels".into()));
    }
    let mut level_metrics = Vec::with_capacity(levels.len());
    for (l, &(n, dt)) in levels.iter().enumerate() {
        let sa = rng::derive_seed(seed, tag::RESIM, &[l as u64, 0]);
        let nb = rng::derive_seed(seed, tag::RESIM, &[l as u64, 1]);
        let mut opts_a = SimOptions::new(n, dt, sa);
        opts_a.store_flow = true;
        let run_a = propagate_fp(
            problem,
            path,
            kernel,
            MeanFieldMode::SelfConsistent,
            &opts_a,
            exec,
        )?;
        let flow_a = run_a.flow.as_ref().expect("flow stored");
        let mut opts_b = SimOptions::new(n, dt, sa);
        opts_b.streams = StreamPlan { init_seed: sa, noise_seed: nb };
        opts_b.store_flow = true;
        let run_b = propagate_fp(
            problem,
            path,
            kernel,
            MeanFieldMode::Frozen(flow_a),
            &opts_b,
            exec,
        )?;
        let flow_b = run_b.flow.as_ref().expect("flow stored");
        let mut worst = 0.0f64;
        for j in 0..flow_a.n_nodes() {
            let d = wasserstein2(flow_b.cloud_at(j), flow_a.cloud_at(j))?;
            worst = worst.max(d);
        }
        level_metrics.push(LevelMetric {
            label: format!("n={n},dt={}", g17(dt)),
            value: worst,
            se: 0.0,
        });
    }
    let monotone = level_metrics.windows(2).all(|w| w[1].value <= w[0].value);
    let finest = level_metrics.last().unwrap().value;
    let pass = monotone && finest <= tolerance;
    let mut metrics = metric_map(&[
        ("w2_finest", finest),
        ("tolerance", tolerance),
        ("monotone", f64::from(u8::from(monotone))),
    ]);
    for (l, m) in level_metrics.iter().enumerate() {
        metrics.insert(format!("w2_level_{l}"), m.value);
    }
    Ok(VerificationReport {
        check_name: "superposition".into(),
        digest: format!(
            "seed={seed};levels={:?};path={};kernel_cells={}",
            levels,
            path.to_text().replace('\n', "|"),
            kernel.n_cells()
        ),
        metrics,
        levels: level_metrics,
        flags: Vec::new(),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Value equivalence: averaging per-path optimal values equals optimizing a
// single jump-history-adapted policy against the same frozen path batch.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ValueEquivalenceConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Per-path optimizer settings (seed is overridden per path).
    pub pathwise: OptimizerOptions,
    /// Policy-side optimizer settings (seed and stream plans overridden so
    /// both sides share per-path substreams).
    pub policy: PolicyOptimizerOptions,
    pub policy_layout: KernelLayout,
    pub count_cap: usize,
    pub time_bucket_edges: Vec<f64>,
    /// Relative agreement demanded against the closed-form reference when
    /// one exists (ignored otherwise).
    pub oracle_rel_band: f64,
}

pub fn check_value_equivalence(
    problem: &Problem,
    cfg: &ValueEquivalenceConfig,
    exec: &Exec,
) -> Result<VerificationReport> {
    let paths = sample_point_paths(&problem.intensity, problem.horizon, cfg.seed, cfg.n_paths)?;
    let mut flags = Vec::new();

    // Both sides use identical per-path substream plans.
    let plans: Vec<StreamPlan> = (0..paths.len())
        .map(|k| StreamPlan::single(rng::derive_seed(cfg.seed, tag::PATH_WORK, &[k as u64])))
        .collect();

    let mut pw = cfg.pathwise.clone();
    pw.seed = cfg.seed;
    let lhs = pathwise_value(problem, &paths, &pw, exec)?;
    for r in &lhs.per_path {
        if r.stalled {
            flags.push(format!("pathwise optimizer stalled on path {}", r.path_index));
        }
    }

    let mut pol = cfg.policy.clone();
    pol.seed = cfg.seed;
    pol.path_plans = Some(plans.clone());
    let start = JumpHistoryPolicy::midpoint(
        problem,
        &cfg.policy_layout,
        cfg.count_cap,
        cfg.time_bucket_edges.clone(),
    )?;
    let rhs = optimize_history_policy(problem, &paths, start, &pol, exec)?;
    if rhs.stalled {
        flags.push("policy optimizer stalled".into());
    }

    // Measured refinement budget: how much the gap itself still moves when
    // the time step is coarsened by 2 (same paths, same substreams; the
    // coarse policy search warm-starts from the fine optimum).
    let mut pw2 = pw.clone();
    pw2.dt *= 2.0;
    pw2.eval_dt *= 2.0;
    let lhs2 = pathwise_value(problem, &paths, &pw2, exec)?;
    let mut pol2 = pol.clone();
    pol2.dt *= 2.0;
    let rhs2 = optimize_history_policy(problem, &paths, rhs.policy.clone(), &pol2, exec)?;
    let gap_fine = lhs.value - rhs.value;
    let gap_coarse = lhs2.value - rhs2.value;
    let budget = (gap_fine - gap_coarse).abs();

    let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
    let mut pass = gap_fine.abs() <= 3.0 * se + budget;

    let mut metrics = metric_map(&[
        ("pathwise_value", lhs.value),
        ("pathwise_se", lhs.se),
        ("policy_value", rhs.value),
        ("policy_se", rhs.se),
        ("gap", gap_fine),
        ("gap_coarse", gap_coarse),
        ("budget", budget),
        ("se_combined", se),
    ]);
    if let Some(lq) = lq_reference(problem) {
        let mut acc = 0.0;
        for p in &paths {
            acc += lq_value_for_path(lq, p, pw.dt.min(1e-3))?;
        }
        let oracle = acc / paths.len() as f64;
        let lhs_rel = (lhs.value - oracle).abs() / oracle.abs().max(1e-12);
        let rhs_rel = (rhs.value - oracle).abs() / oracle.abs().max(1e-12);
        metrics.insert("oracle_value".into(), oracle);
        metrics.insert("pathwise_vs_oracle_rel".into(), lhs_rel);
        metrics.insert("policy_vs_oracle_rel".into(), rhs_rel);
        pass = pass && lhs_rel <= cfg.oracle_rel_band && rhs_rel <= cfg.oracle_rel_band;
    }

    Ok(VerificationReport {
        check_name: "value_equivalence".into(),
        digest: format!(
            "seed={};n_paths={};dt={};policy_states={};plans={}",
            cfg.seed,
            cfg.n_paths,
            g17(pw.dt),
            1 + cfg.count_cap * (cfg.time_bucket_edges.len() - 1),
            plans.len()
        ),
        metrics,
        levels: vec![
            LevelMetric { label: format!("dt={}", g17(pw2.dt)), value: gap_coarse, se },
            LevelMetric { label: format!("dt={}", g17(pw.dt)), value: gap_fine, se },
        ],
        flags,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Strict-vs-relaxed gap: concentrating an optimized relaxed kernel onto its
// per-cell modes should not change the value.
// ---------------------------------------------------------------------------

pub fn check_strict_gap(
    problem: &Problem,
    path: &PointPath,
    opts: &OptimizerOptions,
    rel_band: f64,
    entropy_frac: f64,
    exec: &Exec,
) -> Result<VerificationReport> {
    let out = optimize_pathwise(problem, path, MeanFieldMode::SelfConsistent, opts, exec)?;
    let strict = out.kernel.strictify();

    // Paired re-simulation of both kernels under the training substreams.
    let mut sim = SimOptions::new(opts.n_particles, opts.dt, opts.seed);
    sim.store_flow = false;
    let relaxed_run =
        propagate_fp(problem, path, &out.kernel, MeanFieldMode::SelfConsistent, &sim, exec)?;
    let strict_run =
        propagate_fp(problem, path, &strict, MeanFieldMode::SelfConsistent, &sim, exec)?;
    let (gap, gap_se) =
        paired_diff(&strict_run.per_particle_cost, &relaxed_run.per_particle_cost);

    let n_space = out.kernel.n_space_cells();
    let uniform_entropy = (out.kernel.n_grid() as f64).ln();
    let mut ent_sum = 0.0;
    let mut visited = 0usize;
    for tc in 0..out.kernel.n_time_cells() {
        for sc in 0..n_space {
            if out.visits[tc * n_space + sc] > 0 {
                ent_sum += out.kernel.cell(tc, sc).entropy();
                visited += 1;
            }
        }
    }
    let mean_entropy = if visited > 0 { ent_sum / visited as f64 } else { 0.0 };
    let entropy_ratio = mean_entropy / uniform_entropy;

    let tol = 3.0 * gap_se + rel_band * out.value.mean.abs();
    let pass = gap <= tol && entropy_ratio <= entropy_frac;
    let mut flags = Vec::new();
    if out.stalled {
        flags.push("optimizer stalled".into());
    }

    Ok(VerificationReport {
        check_name: "strict_gap".into(),
        digest: format!(
            "seed={};n={};dt={};path={}",
            opts.seed,
            opts.n_particles,
            g17(opts.dt),
            path.to_text().replace('\n', "|")
        ),
        metrics: metric_map(&[
            ("relaxed_value", out.value.mean),
            ("strict_minus_relaxed", gap),
            ("gap_se", gap_se),
            ("tolerance", tol),
            ("mean_entropy_visited", mean_entropy),
            ("uniform_entropy", uniform_entropy),
            ("entropy_ratio", entropy_ratio),
            ("visited_cells", visited as f64),
        ]),
        levels: Vec::new(),
        flags,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Weak-form Fokker-Planck (martingale) residual on quadratic tests.
// ---------------------------------------------------------------------------

struct GeneratorScratch {
    drift: Vec<f64>,
    diff: Vec<f64>,
    grad: Vec<f64>,
}

/// Kernel-averaged generator value and kernel-averaged `b' H b` (the
/// drift-squared form whose accumulated `dt^2` sum is the exact expected
/// residual of the Euler chain on a quadratic test function).
fn generator_terms(
    problem: &Problem,
    t: f64,
    x: &[f64],
    mu: &crate::measures::MeasureArg<'_>,
    kernel: &ControlKernel,
    tc: usize,
    phi: &QuadraticTestFunction,
    hess: &[f64],
    s: &mut GeneratorScratch,
) -> (f64, f64) {
    let (d, dn) = (problem.dim_state, problem.dim_noise);
    let dist = kernel.cell(tc, kernel.space_cell(x));
    phi.gradient_into(x, &mut s.grad);
    let mut lphi = 0.0;
    let mut bhb = 0.0;
    for &(ix, pq) in &dist.entries {
        let u = kernel.control_point(ix as usize);
        problem.coeffs.drift(t, x, mu, u, &mut s.drift);
        problem.coeffs.diffusion(t, x, mu, u, &mut s.diff);
        let mut v = 0.0;
        for i in 0..d {
            v += s.drift[i] * s.grad[i];
        }
        let mut hb = 0.0;
        for i in 0..d {
            for j in 0..d {
                let h = hess[i * d + j];
                if h != 0.0 {
                    hb += s.drift[i] * h * s.drift[j];
                    let mut c = 0.0;
                    for k in 0..dn {
                        c += s.diff[i * dn + k] * s.diff[j * dn + k];
                    }
                    v += 0.5 * c * h;
                }
            }
        }
        lphi += pq * v;
        bhb += pq * hb;
    }
    (lphi, bhb)
}

/// Per-particle weak-form residual of one flow against one test function:
/// `phi` at the horizon minus `phi` at the start, minus the recorded jump
/// increments, minus the left-rule time integral of the kernel-averaged
/// generator. Returns `(residual mean, SE, drift-induced component)` where
/// the component `0.5 * sum_j dt_j^2 <avg b' H b>` is the exact expected
/// residual of the Euler chain.
fn flow_residual(
    problem: &Problem,
    flow: &MeasureFlow,
    kernel: &ControlKernel,
    phi: &QuadraticTestFunction,
) -> (f64, f64, f64) {
    let dim = flow.dim;
    let n_nodes = flow.n_nodes();
    let n = flow.cloud_at(0).weights.len();
    let hess = phi.hessian();
    let mut s = GeneratorScratch {
        drift: vec![0.0; dim],
        diff: vec![0.0; dim * problem.dim_noise],
        grad: vec![0.0; dim],
    };
    let mut r: Vec<f64> = Vec::with_capacity(n);
    let first = flow.cloud_at(0);
    let last = flow.cloud_at(n_nodes - 1);
    for i in 0..n {
        r.push(phi.eval(&last.points[i * dim..(i + 1) * dim])
            - phi.eval(&first.points[i * dim..(i + 1) * dim]));
    }
    for jump in flow.jumps() {
        let right = flow.cloud_at(jump.node);
        for i in 0..n {
            r[i] -= phi.eval(&right.points[i * dim..(i + 1) * dim])
                - phi.eval(&jump.left_points[i * dim..(i + 1) * dim]);
        }
    }
    let mut drift_component = 0.0;
    for j in 0..n_nodes - 1 {
        let t = flow.times[j];
        let dt = flow.times[j + 1] - t;
        let mu = flow.measure_at(j);
        let tc = kernel.time_cell(t);
        let mut bhb_mean = 0.0;
        for i in 0..n {
            let x = &mu.cloud.points[i * dim..(i + 1) * dim];
            let (lphi, bhb) = generator_terms(problem, t, x, &mu, kernel, tc, phi, &hess, &mut s);
            r[i] -= dt * lphi;
            bhb_mean += bhb;
        }
        drift_component += 0.5 * dt * dt * bhb_mean / n as f64;
    }
    let mean = r.iter().sum::<f64>() / n as f64;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, (var / n as f64).sqrt(), drift_component)
}

/// At each `(particles, dt)` level, simulate the self-consistent system and
/// test for every quadratic `phi` that the flow satisfies the weak-form
/// equation: residual within `3 SE` of zero at the finest level, and the
/// analytically accumulated drift-induced component shrinking by a factor
/// in `[1.5, 3]` per dt halving (when it is not identically zero).
pub fn check_martingale_residual(
    problem: &Problem,
    path: &PointPath,
    kernel: &ControlKernel,
    phis: &[QuadraticTestFunction],
    levels: &[(usize, f64)],
    seed: u64,
    exec: &Exec,
) -> Result<VerificationReport> {
    if levels.is_empty() || phis.is_empty() {
        return Err(CoreError::InvalidConfig("residual check needs levels and tests".into()));
    }
    let mut level_metrics = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut pass = true;
    // residuals[phi][level] = (residual, se, drift component)
    let mut residuals: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); phis.len()];
    for (l, &(n, dt)) in levels.iter().enumerate() {
        let mut opts = SimOptions::new(n, dt, rng::derive_seed(seed, tag::RESIM, &[l as u64]));
        opts.store_flow = true;
        let run =
            propagate_fp(problem, path, kernel, MeanFieldMode::SelfConsistent, &opts, exec)?;
        let flow = run.flow.as_ref().expect("flow stored");
        for (pi, phi) in phis.iter().enumerate() {
            let (res, se, dc) = flow_residual(problem, flow, kernel, phi);
            residuals[pi].push((res, se, dc));
            level_metrics.push(LevelMetric {
                label: format!("phi{pi},n={n},dt={}", g17(dt)),
                value: res,
                se,
            });
        }
    }
    for (pi, per_level) in residuals.iter().enumerate() {
        let &(res, se, dc) = per_level.last().unwrap();
        metrics.insert(format!("phi{pi}_residual_finest"), res);
        metrics.insert(format!("phi{pi}_se_finest"), se);
        metrics.insert(format!("phi{pi}_drift_component_finest"), dc);
        metrics.insert(
            format!("phi{pi}_centered"),
            res - dc,
        );
        pass = pass && res.abs() <= 3.0 * se;
        for w in per_level.windows(2) {
            let (dc0, dc1) = (w[0].2, w[1].2);
            if dc0.abs() > 1e-13 && dc1.abs() > 1e-13 {
                let ratio = dc0 / dc1;
                metrics.insert(format!("phi{pi}_drift_ratio"), ratio);
                pass = pass && (1.5..=3.0).contains(&ratio);
            }
        }
    }
    Ok(VerificationReport {
        check_name: "martingale_residual".into(),
        digest: format!("seed={seed};levels={levels:?};phis={}", phis.len()),
        metrics,
        levels: level_metrics,
        flags: Vec::new(),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Per-jump moment recursion.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MomentGrowthConfig {
    pub rates: Vec<f64>,
    pub paths_per_rate: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    pub layout: KernelLayout,
}

/// Sample paths at each rate, simulate under the midpoint kernel, and
/// hard-check the per-jump moment recursion recorded by the propagator.
/// Passes iff no jump violates it. Also reports the geometric growth
/// factor of the sup-over-time p-moment fitted against jump counts.
pub fn check_moment_growth(
    problem: &Problem,
    cfg: &MomentGrowthConfig,
    exec: &Exec,
) -> Result<VerificationReport> {
    let p = problem.moment_order;
    let mut violations = 0usize;
    let mut jumps_total = 0usize;
    let mut samples: Vec<(f64, f64)> = Vec::new(); // (jump count, ln sup-moment)
    for (ri, &rate) in cfg.rates.iter().enumerate() {
        let spec = IntensitySpec { rate, mark: problem.intensity.mark.clone() };
        let paths = sample_point_paths(
            &spec,
            problem.horizon,
            rng::derive_seed(cfg.seed, tag::POINT_PATH, &[ri as u64]),
            cfg.paths_per_rate,
        )?;
        let run_one = |k: usize| -> Result<(usize, usize, f64)> {
            let kernel =
                ControlKernel::dirac_midpoint(problem, &cfg.layout, &paths[k].jump_times())?;
            let mut opts = SimOptions::new(
                cfg.n_particles,
                cfg.dt,
                rng::derive_seed(cfg.seed, tag::RESIM, &[ri as u64, k as u64]),
            );
            opts.store_flow = true;
            let out = propagate_fp(
                problem,
                &paths[k],
                &kernel,
                MeanFieldMode::SelfConsistent,
                &opts,
                exec,
            )?;
            let flow = out.flow.as_ref().expect("flow stored");
            let mut sup = 0.0f64;
            for j in 0..flow.n_nodes() {
                sup = sup.max(moment(flow.cloud_at(j), p)?);
            }
            Ok((out.diagnostics.moment_violations, paths[k].jump_count(), sup))
        };
        let results: Vec<Result<(usize, usize, f64)>> =
            if cfg.n_particles <= crate::exec::PARTICLE_CHUNK && paths.len() > 1 {
                exec.map_collect(paths.len(), run_one)
            } else {
                (0..paths.len()).map(run_one).collect()
            };
        for r in results {
            let (v, jumps, sup) = r?;
            violations += v;
            jumps_total += jumps;
            if sup > 0.0 {
                samples.push((jumps as f64, sup.ln()));
            }
        }
    }
    // Least-squares slope of ln(sup-moment) on jump count.
    let growth_factor = if samples.len() > 1 {
        let n = samples.len() as f64;
        let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
        let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
        let sxx = samples.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum::<f64>();
        let sxy = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum::<f64>();
        if sxx > 0.0 { (sxy / sxx).exp() } else { 1.0 }
    } else {
        1.0
    };
    let pass = violations == 0;
    Ok(VerificationReport {
        check_name: "moment_growth".into(),
        digest: format!(
            "seed={};rates={:?};paths_per_rate={};n={};dt={}",
            cfg.seed,
            cfg.rates,
            cfg.paths_per_rate,
            cfg.n_particles,
            g17(cfg.dt)
        ),
        metrics: metric_map(&[
            ("violations", violations as f64),
            ("jumps_checked", jumps_total as f64),
            ("moment_order", p),
            ("fitted_growth_factor", growth_factor),
            ("paths", (cfg.rates.len() * cfg.paths_per_rate) as f64),
        ]),
        levels: Vec::new(),
        flags: Vec::new(),
        pass,
    })
}

// ---------------------------------------------------------------------------
// Continuity of the pathwise-integrated value in the initial law.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ValueContinuityConfig {
    /// Mean shifts applied to the first state axis, strictly decreasing.
    pub shifts: Vec<f64>,
    pub n_paths: usize,
    pub opts: OptimizerOptions,
    pub seed: u64,
    /// Relative band against the closed-form gap when one exists.
    pub rel_band: f64,
    /// Fallback: the smallest shift's gap must be below this plus 2 SE when
    /// no closed form exists.
    pub abs_tolerance: f64,
}

pub fn check_value_continuity(
    problem: &Problem,
    cfg: &ValueContinuityConfig,
    exec: &Exec,
) -> Result<VerificationReport> {
    if cfg.shifts.is_empty() || cfg.shifts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CoreError::InvalidConfig("shifts must be strictly decreasing".into()));
    }
    let paths = sample_point_paths(&problem.intensity, problem.horizon, cfg.seed, cfg.n_paths)?;
    let mut opts = cfg.opts.clone();
    opts.seed = cfg.seed;
    let base = pathwise_value(problem, &paths, &opts, exec)?;
    let mut flags: Vec<String> = base
        .per_path
        .iter()
        .filter(|r| r.stalled)
        .map(|r| format!("base optimizer stalled on path {}", r.path_index))
        .collect();

    let lq = lq_reference(problem);
    // Per-path closed forms reused across shifts.
    let lq_sols = match lq {
        Some(params) => Some(
            paths
                .iter()
                .map(|p| solve_lq_backward(params, &p.jump_times(), None, opts.dt.min(1e-3)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let mut gaps = Vec::new();
    let mut ses = Vec::new();
    let mut oracle_gaps = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut pass = true;
    let mut level_metrics = Vec::new();
    for (j, &shift) in cfg.shifts.iter().enumerate() {
        let mut delta = vec![0.0; problem.dim_state];
        delta[0] = shift;
        let shifted = problem.with_shifted_initial(&delta)?;
        let v = pathwise_value(&shifted, &paths, &opts, exec)?;
        for r in &v.per_path {
            if r.stalled {
                flags.push(format!("shift {shift} optimizer stalled on path {}", r.path_index));
            }
        }
        let diffs: Vec<f64> = v
            .per_path
            .iter()
            .zip(&base.per_path)
            .map(|(a, b)| a.value - b.value)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let se = if diffs.len() > 1 {
            (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (diffs.len() as f64 * (diffs.len() - 1) as f64))
                .sqrt()
        } else {
            (v.se * v.se + base.se * base.se).sqrt()
        };
        let gap = mean.abs();
        gaps.push(gap);
        ses.push(se);
        metrics.insert(format!("gap_shift_{j}"), gap);
        metrics.insert(format!("se_shift_{j}"), se);
        level_metrics.push(LevelMetric { label: format!("shift={}", g17(shift)), value: gap, se });
        if let (Some(params), Some(sols)) = (lq, &lq_sols) {
            let var0 = params.initial_std * params.initial_std;
            let og = sols
                .iter()
                .map(|s| s.value(params.initial_mean + shift, var0) - s.value(params.initial_mean, var0))
                .sum::<f64>()
                / sols.len() as f64;
            let og = og.abs();
            oracle_gaps.push(og);
            metrics.insert(format!("oracle_gap_shift_{j}"), og);
            pass = pass && (gap - og).abs() <= 3.0 * se + cfg.rel_band * og;
        }
    }
    let nonincreasing = gaps.windows(2).all(|w| w[1] <= w[0]);
    pass = pass && nonincreasing;
    if oracle_gaps.is_empty() {
        pass = pass && *gaps.last().unwrap() <= cfg.abs_tolerance + 2.0 * ses.last().unwrap();
    }
    metrics.insert("nonincreasing".into(), f64::from(u8::from(nonincreasing)));
    metrics.insert("base_value".into(), base.value);

    Ok(VerificationReport {
        check_name: "value_continuity".into(),
        digest: format!(
            "seed={};n_paths={};shifts={:?};dt={}",
            cfg.seed,
            cfg.n_paths,
            cfg.shifts,
            g17(opts.dt)
        ),
        metrics,
        levels: level_metrics,
        flags,
        pass,
    })
}
