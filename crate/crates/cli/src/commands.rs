//! Command implementations. Every command is a pure function from
//! (config, executor) to a summary map plus file contents; `main` does the
//! writing and `replay` re-runs the same function and compares bytes.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};

use pathwise_mfc::dynamics::MeanFieldMode;
use pathwise_mfc::fmt::g17;
use pathwise_mfc::kernel::ControlKernel;
use pathwise_mfc::lq::solve_lq_backward;
use pathwise_mfc::mfg::{assemble_strong_mfe, MfeOptions, StrongMfeOptions};
use pathwise_mfc::model::{LqParams, Problem, QuadraticTestFunction};
use pathwise_mfc::noise::{sample_point_paths, PointPath};
use pathwise_mfc::optimizer::{optimize_pathwise, pathwise_value};
use pathwise_mfc::rng::derive_seed;
use pathwise_mfc::verify::{
    check_martingale_residual, check_moment_growth, check_strict_gap, check_superposition,
    check_value_continuity, check_value_equivalence, MomentGrowthConfig, ValueContinuityConfig,
    ValueEquivalenceConfig, VerificationReport,
};
use pathwise_mfc::Exec;

use crate::config::{frozen_path, RunConfig, VerifyConfig};

/// Stream-derivation tag reserved for seeds this binary hands to the
/// verification checks; disjoint from every tag the engine uses itself.
const CLI_CHECK_TAG: u64 = 0xC11;

pub struct CmdOutput {
    /// Headline numbers, already formatted (floats at 17 significant
    /// digits).
    pub summary: BTreeMap<String, String>,
    /// `(file name, contents)` pairs to write next to the manifest.
    pub files: Vec<(String, String)>,
    /// Human-oriented progress lines to print before the summary.
    pub notes: Vec<String>,
}

/// Run `command` on `cfg`. `checks` restricts the verify command to the
/// named checks (empty: all configured ones); other commands ignore it.
pub fn run_command(
    command: &str,
    cfg: &RunConfig,
    checks: &[String],
    exec: &Exec,
) -> Result<CmdOutput> {
    match command {
        "sample-noise" => sample_noise(cfg, exec),
        "solve-pathwise" => solve_pathwise(cfg, exec),
        "value" => value(cfg, exec),
        "mfg" => mfg(cfg, exec),
        "verify" => verify(cfg, checks, exec),
        other => bail!("unknown command {other:?} (did the manifest come from a newer build?)"),
    }
}

/// Closed-form reference parameters, available when the benchmark has no
/// mean-field coupling in its cost (the coupled case has no closed form
/// along a frozen path).
fn oracle_params(problem: &Problem) -> Option<&LqParams> {
    problem.lq.as_ref().filter(|p| p.mean_coupling == 0.0)
}

fn oracle_value_for_path(params: &LqParams, path: &PointPath, dt: f64) -> Result<f64> {
    let sol = solve_lq_backward(params, &path.jump_times(), None, dt.min(1e-3))?;
    Ok(sol.value(params.initial_mean, params.initial_std * params.initial_std))
}

fn insert_f(summary: &mut BTreeMap<String, String>, key: &str, v: f64) {
    summary.insert(key.to_string(), g17(v));
}

fn insert_u(summary: &mut BTreeMap<String, String>, key: &str, v: usize) {
    summary.insert(key.to_string(), v.to_string());
}

fn sample_noise(cfg: &RunConfig, _exec: &Exec) -> Result<CmdOutput> {
    let section = cfg.noise.as_ref().context("config has no `noise` section")?;
    let problem = cfg.problem()?;
    let paths =
        sample_point_paths(&problem.intensity, problem.horizon, cfg.seed, section.count)?;

    let mut jsonl = String::new();
    for p in &paths {
        jsonl.push_str(&serde_json::to_string(p)?);
        jsonl.push('\n');
    }

    let total: usize = paths.iter().map(PointPath::jump_count).sum();
    let max = paths.iter().map(PointPath::jump_count).max().unwrap_or(0);
    let mut summary = BTreeMap::new();
    insert_u(&mut summary, "n_paths", paths.len());
    insert_u(&mut summary, "total_events", total);
    insert_u(&mut summary, "max_jump_count", max);
    insert_f(&mut summary, "mean_jump_count", total as f64 / paths.len().max(1) as f64);
    insert_f(&mut summary, "rate", problem.intensity.rate);
    insert_f(&mut summary, "horizon", problem.horizon);

    Ok(CmdOutput {
        summary,
        files: vec![("paths.jsonl".into(), jsonl)],
        notes: Vec::new(),
    })
}

fn solve_pathwise(cfg: &RunConfig, exec: &Exec) -> Result<CmdOutput> {
    let section = cfg.solve.as_ref().context("config has no `solve` section")?;
    let problem = cfg.problem()?;
    let path = frozen_path(&problem, &section.jump_times)?;
    let opts = section.optimizer.build(cfg.seed);

    let out = optimize_pathwise(&problem, &path, MeanFieldMode::SelfConsistent, &opts, exec)?;
    let est = out.eval_value.unwrap_or(out.value);

    let mut summary = BTreeMap::new();
    insert_f(&mut summary, "value", est.mean);
    insert_f(&mut summary, "se", est.se);
    insert_f(&mut summary, "train_value", out.value.mean);
    insert_f(&mut summary, "train_se", out.value.se);
    insert_u(&mut summary, "sweeps", out.sweeps);
    insert_u(&mut summary, "moves_accepted", out.accepted);
    insert_u(&mut summary, "jump_count", path.jump_count());
    summary.insert("stalled".into(), out.stalled.to_string());

    if let Some(params) = oracle_params(&problem) {
        let oracle = oracle_value_for_path(params, &path, opts.dt)?;
        insert_f(&mut summary, "oracle_value", oracle);
        insert_f(&mut summary, "oracle_rel_err", (est.mean - oracle).abs() / oracle.abs());
    }

    let kernel_json = serde_json::to_string_pretty(&out.kernel)? + "\n";
    Ok(CmdOutput {
        summary,
        files: vec![("kernel.json".into(), kernel_json)],
        notes: Vec::new(),
    })
}

fn value(cfg: &RunConfig, exec: &Exec) -> Result<CmdOutput> {
    let section = cfg.value.as_ref().context("config has no `value` section")?;
    let problem = cfg.problem()?;
    let paths =
        sample_point_paths(&problem.intensity, problem.horizon, cfg.seed, section.n_paths)?;
    let opts = section.optimizer.build(cfg.seed);
    let pv = pathwise_value(&problem, &paths, &opts, exec)?;

    let mut csv = String::from("path_index,jump_count,value,se,sweeps,stalled\n");
    for r in &pv.per_path {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.path_index,
            r.jump_count,
            g17(r.value),
            g17(r.se),
            r.sweeps,
            r.stalled
        ));
    }

    let stalled = pv.per_path.iter().filter(|r| r.stalled).count();
    let jumps: usize = pv.per_path.iter().map(|r| r.jump_count).sum();
    let mut summary = BTreeMap::new();
    insert_f(&mut summary, "value", pv.value);
    insert_f(&mut summary, "se", pv.se);
    insert_u(&mut summary, "n_paths", pv.per_path.len());
    insert_u(&mut summary, "stalled_paths", stalled);
    insert_f(&mut summary, "mean_jump_count", jumps as f64 / pv.per_path.len() as f64);

    if let Some(params) = oracle_params(&problem) {
        let mut acc = 0.0;
        for p in &paths {
            acc += oracle_value_for_path(params, p, opts.dt)?;
        }
        let oracle = acc / paths.len() as f64;
        insert_f(&mut summary, "oracle_value", oracle);
        insert_f(&mut summary, "oracle_rel_err", (pv.value - oracle).abs() / oracle.abs());
    }

    Ok(CmdOutput {
        summary,
        files: vec![("per_path.csv".into(), csv)],
        notes: Vec::new(),
    })
}

fn mfg(cfg: &RunConfig, exec: &Exec) -> Result<CmdOutput> {
    let section = cfg.mfg.as_ref().context("config has no `mfg` section")?;
    let problem = cfg.problem()?;

    let mut mfe =
        MfeOptions::new(section.layout.build(), section.n_particles, section.dt, cfg.seed);
    mfe.max_iters = section.max_iters;
    mfe.damping = section.damping;
    mfe.tol_w2 = section.tol_w2;
    mfe.max_sweeps = section.max_sweeps;
    mfe.n_restarts = section.n_restarts;

    let mut opts = StrongMfeOptions::new(section.n_paths, cfg.seed, mfe);
    opts.resim_particles = section.resim_particles;
    opts.consistency_tol = section.consistency_tol;
    opts.min_converged_frac = section.min_converged_frac;

    let est = assemble_strong_mfe(&problem, &opts, exec)?;

    let mut csv = String::from(
        "path_index,jump_count,converged,iterations,final_residual,value,value_se,\
         exploitability,exploitability_se,consistency_w2\n",
    );
    for r in &est.per_path {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.path_index,
            r.jump_count,
            r.converged,
            r.iterations,
            g17(r.final_residual),
            g17(r.value),
            g17(r.value_se),
            g17(r.exploitability),
            g17(r.exploitability_se),
            g17(r.consistency_w2)
        ));
    }

    let iters: usize = est.per_path.iter().map(|r| r.iterations).sum();
    let mut summary = BTreeMap::new();
    insert_f(&mut summary, "value", est.value);
    insert_f(&mut summary, "value_se", est.value_se);
    insert_f(&mut summary, "converged_frac", est.converged_frac);
    insert_f(&mut summary, "max_exploitability", est.max_exploitability);
    insert_f(&mut summary, "max_consistency_w2", est.max_consistency_w2);
    insert_f(&mut summary, "mean_iterations", iters as f64 / est.per_path.len() as f64);
    insert_u(&mut summary, "n_paths", est.per_path.len());
    summary.insert("accepted".into(), est.accepted.to_string());

    Ok(CmdOutput {
        summary,
        files: vec![("per_path.csv".into(), csv)],
        notes: Vec::new(),
    })
}

fn verify(cfg: &RunConfig, checks: &[String], exec: &Exec) -> Result<CmdOutput> {
    let section: &VerifyConfig =
        cfg.verify.as_ref().context("config has no `verify` section")?;
    let problem = cfg.problem()?;
    let wants = |name: &str| checks.is_empty() || checks.iter().any(|c| c == name);
    let mut reports: Vec<VerificationReport> = Vec::new();

    if let Some(c) = section.superposition.as_ref().filter(|_| wants("superposition")) {
        let path = frozen_path(&problem, &c.jump_times)?;
        let kernel =
            ControlKernel::dirac_midpoint(&problem, &c.layout.build(), &path.jump_times())?;
        let levels: Vec<(usize, f64)> =
            c.levels.iter().map(|l| (l.n_particles, l.dt)).collect();
        reports.push(check_superposition(
            &problem,
            &path,
            &kernel,
            &levels,
            c.tolerance,
            derive_seed(cfg.seed, CLI_CHECK_TAG, &[0]),
            exec,
        )?);
    }

    if let Some(c) = section.value_equivalence.as_ref().filter(|_| wants("value_equivalence")) {
        let seed = derive_seed(cfg.seed, CLI_CHECK_TAG, &[1]);
        let vc = ValueEquivalenceConfig {
            n_paths: c.n_paths,
            seed,
            pathwise: c.pathwise.build(seed),
            policy: c.policy_options(seed),
            policy_layout: c.policy_layout.build(),
            count_cap: c.count_cap,
            time_bucket_edges: c.bucket_edges(problem.horizon),
            oracle_rel_band: c.oracle_rel_band,
        };
        reports.push(check_value_equivalence(&problem, &vc, exec)?);
    }

    if let Some(c) = section.strict_gap.as_ref().filter(|_| wants("strict_gap")) {
        let path = frozen_path(&problem, &c.jump_times)?;
        let opts = c.optimizer.build(derive_seed(cfg.seed, CLI_CHECK_TAG, &[2]));
        reports.push(check_strict_gap(
            &problem,
            &path,
            &opts,
            c.rel_band,
            c.entropy_frac,
            exec,
        )?);
    }

    if let Some(c) =
        section.martingale_residual.as_ref().filter(|_| wants("martingale_residual"))
    {
        let path = frozen_path(&problem, &c.jump_times)?;
        let kernel =
            ControlKernel::dirac_midpoint(&problem, &c.layout.build(), &path.jump_times())?;
        let mut phis = Vec::new();
        for i in 0..problem.dim_state {
            phis.push(QuadraticTestFunction::coordinate(problem.dim_state, i));
            phis.push(QuadraticTestFunction::coordinate_squared(problem.dim_state, i));
        }
        let levels: Vec<(usize, f64)> =
            c.levels.iter().map(|l| (l.n_particles, l.dt)).collect();
        reports.push(check_martingale_residual(
            &problem,
            &path,
            &kernel,
            &phis,
            &levels,
            derive_seed(cfg.seed, CLI_CHECK_TAG, &[3]),
            exec,
        )?);
    }

    if let Some(c) = section.moment_growth.as_ref().filter(|_| wants("moment_growth")) {
        let mc = MomentGrowthConfig {
            rates: c.rates.clone(),
            paths_per_rate: c.paths_per_rate,
            n_particles: c.n_particles,
            dt: c.dt,
            seed: derive_seed(cfg.seed, CLI_CHECK_TAG, &[4]),
            layout: c.layout.build(),
        };
        reports.push(check_moment_growth(&problem, &mc, exec)?);
    }

    if let Some(c) = section.value_continuity.as_ref().filter(|_| wants("value_continuity")) {
        let seed = derive_seed(cfg.seed, CLI_CHECK_TAG, &[5]);
        let cc = ValueContinuityConfig {
            shifts: c.shifts.clone(),
            n_paths: c.n_paths,
            opts: c.optimizer.build(seed),
            seed,
            rel_band: c.rel_band,
            abs_tolerance: c.abs_tolerance,
        };
        reports.push(check_value_continuity(&problem, &cc, exec)?);
    }

    if reports.is_empty() {
        bail!("no verification checks selected (empty `verify` section or unknown --check names)");
    }

    let mut files = Vec::new();
    let mut csv = String::from("check,key,value\n");
    let mut notes = Vec::new();
    let mut summary = BTreeMap::new();
    let mut all_pass = true;
    for r in &reports {
        notes.push(r.summary_line());
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
        summary.insert(
            format!("check_{}", r.check_name),
            if r.pass { "pass" } else { "fail" }.to_string(),
        );
        all_pass &= r.pass;
        files.push((
            format!("report_{}.json", r.check_name),
            serde_json::to_string_pretty(r)? + "\n",
        ));
    }
    insert_u(&mut summary, "checks_run", reports.len());
    summary.insert("overall".into(), if all_pass { "pass" } else { "fail" }.to_string());
    files.push(("reports.csv".into(), csv));

    Ok(CmdOutput { summary, files, notes })
}
