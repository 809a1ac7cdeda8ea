//! Compares the data-parallel executor against the sequential fallback on
//! the three hot loops: particle propagation under a fixed kernel, a short
//! pathwise optimization, and a multi-path value estimate (where work is
//! distributed over paths rather than particles). On a single hardware core
//! the two executors should tie to within noise; the point of the suite is
//! to confirm the parallel path never *loses* and to measure its gain when
//! cores are available. Results are identical either way by construction —
//! equality is enforced by the test suite, not here.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pathwise_mfc::dynamics::{propagate_fp, MeanFieldMode, SimOptions};
use pathwise_mfc::kernel::{ControlKernel, KernelLayout};
use pathwise_mfc::model::{make_lq_problem, LqParams, Problem};
use pathwise_mfc::noise::{sample_point_paths, PointEvent, PointPath};
use pathwise_mfc::optimizer::{optimize_pathwise, pathwise_value, OptimizerOptions};
use pathwise_mfc::Exec;

fn problem() -> Problem {
    make_lq_problem(LqParams::default()).unwrap()
}

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

fn execs() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::sequential()), ("workers4", Exec::with_workers(4))]
}

/// Particle-level parallelism: one large cloud pushed through the
/// McKean-Vlasov dynamics under the midpoint kernel.
fn bench_propagation(c: &mut Criterion) {
    let problem = problem();
    let path = two_jump_path();
    let layout = KernelLayout::new(4, 4, 33);
    let kernel = ControlKernel::dirac_midpoint(&problem, &layout, &path.jump_times()).unwrap();

    let mut group = c.benchmark_group("propagate_fp");
    group.sample_size(20);
    for n_particles in [4096usize, 16384] {
        let mut opts = SimOptions::new(n_particles, 1.0 / 128.0, 99);
        opts.store_flow = false;
        for (name, exec) in execs() {
            group.bench_with_input(
                BenchmarkId::new(name, n_particles),
                &n_particles,
                |b, _| {
                    b.iter(|| {
                        propagate_fp(
                            &problem,
                            &path,
                            &kernel,
                            MeanFieldMode::SelfConsistent,
                            &opts,
                            &exec,
                        )
                        .unwrap()
                    })
                },
            );
        }
    }
    group.finish();
}

/// The inner loop of everything else: coordinate descent over kernel cells
/// with paired-stream cost probes.
fn bench_optimize(c: &mut Criterion) {
    let problem = problem();
    let path = two_jump_path();
    let mut opts = OptimizerOptions::new(KernelLayout::new(3, 3, 17), 512, 1.0 / 32.0, 7);
    opts.max_sweeps = 2;
    opts.n_restarts = 0;
    opts.store_flow = false;

    let mut group = c.benchmark_group("optimize_pathwise");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| {
                optimize_pathwise(&problem, &path, MeanFieldMode::SelfConsistent, &opts, &exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

/// Path-level parallelism: small clouds, many frozen jump paths, so the
/// executor distributes whole per-path solves instead of particle chunks.
fn bench_value_over_paths(c: &mut Criterion) {
    let problem = problem();
    let paths = sample_point_paths(&problem.intensity, problem.horizon, 41, 8).unwrap();
    let mut opts = OptimizerOptions::new(KernelLayout::new(3, 3, 17), 256, 1.0 / 32.0, 7);
    opts.max_sweeps = 2;
    opts.n_restarts = 0;
    opts.store_flow = false;

    let mut group = c.benchmark_group("pathwise_value_8_paths");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_function(name, |b| {
            b.iter(|| pathwise_value(&problem, &paths, &opts, &exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_propagation, bench_optimize, bench_value_over_paths);
criterion_main!(benches);
