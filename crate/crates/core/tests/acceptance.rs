//! Acceptance gate: one test per claim the engine is sold on, each
//! printing a single PASS/FAIL line (run with `-- --nocapture` to see them
//! on success). Sizes are fixed; every run is deterministic in the seeds
//! below.

use pathwise_mfc::kernel::{ControlKernel, KernelLayout};
use pathwise_mfc::mfg::{assemble_strong_mfe, solve_pathwise_mfe, MfeOptions, StrongMfeOptions};
use pathwise_mfc::model::{make_lq_problem, LqParams, Problem, QuadraticTestFunction};
use pathwise_mfc::noise::{PointEvent, PointPath};
use pathwise_mfc::optimizer::OptimizerOptions;
use pathwise_mfc::verify::{
    check_martingale_residual, check_moment_growth, check_strict_gap, check_superposition,
    check_value_continuity, check_value_equivalence, MomentGrowthConfig, ValueContinuityConfig,
    ValueEquivalenceConfig, VerificationReport,
};
use pathwise_mfc::Exec;

fn exec() -> Exec {
    Exec::with_workers(4)
}

fn lq_problem() -> Problem {
    make_lq_problem(LqParams::default()).unwrap()
}

/// The fixed two-jump path several criteria share.
fn two_jump_path() -> PointPath {
    PointPath::new(
        1.0,
        vec![
            PointEvent { time: 0.35, mark: vec![0.0] },
            PointEvent { time: 0.8, mark: vec![0.0] },
        ],
    )
    .unwrap()
}

fn layout() -> KernelLayout {
    KernelLayout::new(4, 4, 65)
}

fn verdict(criterion: &str, name: &str, pass: bool, detail: String) {
    println!(
        "ACCEPTANCE {criterion} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn metric(report: &VerificationReport, key: &str) -> f64 {
    *report
        .metrics
        .get(key)
        .unwrap_or_else(|| panic!("report {} lacks metric {key}", report.check_name))
}

#[test]
fn c1_superposition_of_the_empirical_flow() {
    let problem = lq_problem();
    let path = two_jump_path();
    let kernel = ControlKernel::dirac_midpoint(&problem, &layout(), &path.jump_times()).unwrap();
    let levels = [(2500usize, 2f64.powi(-8)), (10_000, 2f64.powi(-10))];

    let report =
        check_superposition(&problem, &path, &kernel, &levels, 0.05, 1001, &exec()).unwrap();

    verdict(
        "C1",
        "superposition",
        report.pass,
        format!(
            "w2 {:.3e} -> {:.3e}, tolerance 5.0e-2, monotone={}",
            metric(&report, "w2_level_0"),
            metric(&report, "w2_level_1"),
            metric(&report, "monotone") == 1.0
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c2_pathwise_and_common_noise_values_agree() {
    let problem = lq_problem();
    // Fine control grid: rounding the continuous feedback to 65 atoms over
    // the generous control box would alone cost more than half the oracle
    // band.
    let fine = KernelLayout::new(4, 4, 257);
    let mut pathwise = OptimizerOptions::new(fine.clone(), 192, 2f64.powi(-6), 1002);
    pathwise.n_restarts = 1;
    pathwise.store_flow = false;
    let cfg = ValueEquivalenceConfig {
        n_paths: 100,
        seed: 1002,
        pathwise,
        policy: pathwise_mfc::optimizer::PolicyOptimizerOptions::new(192, 2f64.powi(-6), 1002),
        policy_layout: fine,
        count_cap: 2,
        time_bucket_edges: vec![0.0, 0.5, 1.0],
        oracle_rel_band: 0.05,
    };
    let report = check_value_equivalence(&problem, &cfg, &exec()).unwrap();

    verdict(
        "C2",
        "value_equivalence",
        report.pass,
        format!(
            "gap {:.3e} vs 3se+budget {:.3e}, lhs/rhs vs oracle {:.2}%/{:.2}%",
            metric(&report, "gap").abs(),
            3.0 * metric(&report, "se_combined") + metric(&report, "budget"),
            1e2 * metric(&report, "pathwise_vs_oracle_rel"),
            1e2 * metric(&report, "policy_vs_oracle_rel"),
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c3_zero_intensity_reduces_to_the_classical_problem() {
    let params = LqParams { rate: 0.0, ..LqParams::default() };
    let problem = make_lq_problem(params).unwrap();
    // The 2% oracle band needs a rich kernel class: more cells than the
    // jump criteria use, and a control grid fine enough that rounding the
    // continuous feedback to grid atoms costs well under a percent.
    let rich = KernelLayout::new(8, 8, 257);
    let mut pathwise = OptimizerOptions::new(rich.clone(), 8000, 2f64.powi(-7), 1003);
    pathwise.n_restarts = 1;
    pathwise.store_flow = false;
    let cfg = ValueEquivalenceConfig {
        n_paths: 1,
        seed: 1003,
        pathwise,
        policy: pathwise_mfc::optimizer::PolicyOptimizerOptions::new(8000, 2f64.powi(-7), 1003),
        policy_layout: rich,
        count_cap: 2,
        time_bucket_edges: vec![0.0, 0.5, 1.0],
        oracle_rel_band: 0.02,
    };
    let report = check_value_equivalence(&problem, &cfg, &exec()).unwrap();

    verdict(
        "C3",
        "zero_intensity_reduction",
        report.pass,
        format!(
            "gap {:.3e} vs 3se+budget {:.3e}, lhs/rhs vs oracle {:.2}%/{:.2}%",
            metric(&report, "gap").abs(),
            3.0 * metric(&report, "se_combined") + metric(&report, "budget"),
            1e2 * metric(&report, "pathwise_vs_oracle_rel"),
            1e2 * metric(&report, "policy_vs_oracle_rel"),
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c4_per_jump_moment_recursion_never_fires() {
    let problem = lq_problem();
    let cfg = MomentGrowthConfig {
        rates: vec![2.0],
        paths_per_rate: 200,
        n_particles: 256,
        dt: 2f64.powi(-6),
        seed: 1004,
        layout: layout(),
    };
    let report = check_moment_growth(&problem, &cfg, &exec()).unwrap();

    verdict(
        "C4",
        "moment_recursion",
        report.pass,
        format!(
            "{} violations over {} jumps (p=4, growth factor {:.3})",
            metric(&report, "violations"),
            metric(&report, "jumps_checked"),
            metric(&report, "fitted_growth_factor"),
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c5_strictified_kernel_loses_nothing() {
    let problem = lq_problem();
    let path = two_jump_path();
    let mut opts = OptimizerOptions::new(layout(), 512, 2f64.powi(-6), 1005);
    opts.n_restarts = 2;
    opts.store_flow = false;
    let report = check_strict_gap(&problem, &path, &opts, 0.02, 0.25, &exec()).unwrap();

    verdict(
        "C5",
        "strict_vs_relaxed",
        report.pass,
        format!(
            "gap {:.3e} vs bound {:.3e}, entropy ratio {:.3} <= 0.25",
            metric(&report, "strict_minus_relaxed"),
            metric(&report, "tolerance"),
            metric(&report, "entropy_ratio"),
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c6_value_is_continuous_in_the_initial_law() {
    let problem = lq_problem();
    // The band is 2% of the value *difference*, so the per-value class bias
    // must cancel between the base and shifted problems. Space cells follow
    // the shifted mean congruently; a fine control grid keeps the
    // non-cancelling part (feedback re-rounding) well below the band.
    let mut opts =
        OptimizerOptions::new(KernelLayout::new(4, 4, 257), 512, 2f64.powi(-6), 1006);
    opts.n_restarts = 1;
    opts.store_flow = false;
    let cfg = ValueContinuityConfig {
        shifts: vec![0.4, 0.2, 0.1],
        n_paths: 8,
        opts,
        seed: 1006,
        rel_band: 0.02,
        abs_tolerance: 0.05,
    };
    let report = check_value_continuity(&problem, &cfg, &exec()).unwrap();

    let gaps: Vec<String> =
        report.levels.iter().map(|l| format!("{:.3e}", l.value)).collect();
    verdict(
        "C6",
        "value_continuity",
        report.pass,
        format!("gaps [{}] nonincreasing, within 3se + 2% of closed-form gaps", gaps.join(", ")),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c7_martingale_residual_vanishes_at_euler_rate() {
    let problem = lq_problem();
    let path = two_jump_path();
    let kernel = ControlKernel::dirac_midpoint(&problem, &layout(), &path.jump_times()).unwrap();
    let phis = [
        QuadraticTestFunction::coordinate(1, 0),
        QuadraticTestFunction::coordinate_squared(1, 0),
    ];
    let levels = [(10_000usize, 2f64.powi(-9)), (10_000, 2f64.powi(-10))];
    let report =
        check_martingale_residual(&problem, &path, &kernel, &phis, &levels, 1007, &exec())
            .unwrap();

    verdict(
        "C7",
        "martingale_residual",
        report.pass,
        format!(
            "|res| {:.2e}/{:.2e} vs 3se {:.2e}/{:.2e}, drift ratio {:.2}",
            metric(&report, "phi0_residual_finest").abs(),
            metric(&report, "phi1_residual_finest").abs(),
            3.0 * metric(&report, "phi0_se_finest"),
            3.0 * metric(&report, "phi1_se_finest"),
            metric(&report, "phi1_drift_ratio"),
        ),
    );
    assert!(report.pass, "{}", report.summary_line());
}

#[test]
fn c8_pathwise_equilibria_glue_into_a_strong_one() {
    let params = LqParams { mean_coupling: 0.1, ..LqParams::default() };
    let problem = make_lq_problem(params).unwrap();
    let ex = exec();

    // One frozen two-jump path: the fixed-point iteration must converge and
    // leave no profitable deviation beyond noise + 2% of the value scale.
    let mfe_layout = KernelLayout::new(4, 4, 33);
    let single = solve_pathwise_mfe(
        &problem,
        &two_jump_path(),
        &MfeOptions::new(mfe_layout.clone(), 1024, 2f64.powi(-5), 1008),
        &ex,
    )
    .unwrap();
    let expl_bound = 3.0 * single.exploitability_se + 0.02 * single.value.mean.abs();
    let single_pass = single.converged && single.exploitability <= expl_bound;

    // Gluing over sampled paths: enough convergence and per-path agreement
    // between the equilibrium flow and an independent large re-simulation.
    // The agreement tolerance is absolute, and the finite-sample Wasserstein
    // floor scales like sqrt(1/N + 1/M) times the cloud dispersion, which
    // multiplicative jumps amplify on the jump-heavy paths; these sizes put
    // the worst-path floor near 0.03 against the 0.05 bound.
    let mut opts =
        StrongMfeOptions::new(50, 1008, MfeOptions::new(mfe_layout, 4096, 2f64.powi(-5), 0));
    opts.resim_particles = 16384;
    opts.consistency_tol = 0.05;
    opts.min_converged_frac = 0.9;
    let glued = assemble_strong_mfe(&problem, &opts, &ex).unwrap();
    let glued_pass = glued.accepted
        && glued.converged_frac >= 0.9
        && glued.max_consistency_w2 <= 0.05;

    let pass = single_pass && glued_pass;
    verdict(
        "C8",
        "pathwise_mfe",
        pass,
        format!(
            "single path: converged={} exploitability {:.2e} <= {:.2e}; glued: {:.0}% converged, max consistency w2 {:.3}",
            single.converged,
            single.exploitability,
            expl_bound,
            1e2 * glued.converged_frac,
            glued.max_consistency_w2,
        ),
    );
    assert!(
        pass,
        "single: converged={} expl={} bound={}; glued: frac={} consistency={} accepted={}",
        single.converged,
        single.exploitability,
        expl_bound,
        glued.converged_frac,
        glued.max_consistency_w2,
        glued.accepted
    );
}
