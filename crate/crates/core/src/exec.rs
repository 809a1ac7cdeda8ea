//! Execution strategy: data-parallel via rayon when the `parallel` feature is
//! enabled, plain sequential loops otherwise.
//!
//! The two paths produce bit-identical results: work items carry pre-assigned
//! RNG substreams (see [`crate::rng`]), outputs are collected in index order,
//! and reductions happen sequentially over the collected vector. Worker count
//! therefore affects wall time only.

use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::Arc;

/// Particles per work unit when splitting per-particle loops.
pub(crate) const PARTICLE_CHUNK: usize = 512;

#[derive(Clone)]
pub struct Exec {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Exec {
    /// Single-threaded execution.
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Execution on `n` worker threads. `n <= 1` (or builds without the
    /// `parallel` feature) fall back to sequential loops.
    pub fn with_workers(n: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if n > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("failed to build worker pool");
                return Self {
                    workers: n,
                    pool: Some(Arc::new(pool)),
                };
            }
        }
        let _ = n;
        Self::sequential()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// `(0..n).map(f)` collected in index order.
    pub fn map_collect<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Apply `f(particle_index, state, rng, accumulator, scratch)` to every
    /// particle. `states` is a flat `n_particles x dim` array, `acc` one
    /// number per particle (e.g. accumulated cost); `init` builds reusable
    /// scratch buffers, once per work unit. Each particle owns its
    /// generator, so the loop may split anywhere without changing results.
    pub fn for_each_particle<S, I, F>(
        &self,
        dim: usize,
        states: &mut [f64],
        rngs: &mut [ChaCha8Rng],
        acc: &mut [f64],
        init: I,
        f: F,
    ) where
        S: Send,
        I: Fn() -> S + Sync,
        F: Fn(usize, &mut [f64], &mut ChaCha8Rng, &mut f64, &mut S) + Sync,
    {
        let n = rngs.len();
        debug_assert_eq!(states.len(), n * dim);
        debug_assert_eq!(acc.len(), n);
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            if n > PARTICLE_CHUNK {
                pool.install(|| {
                    states
                        .par_chunks_mut(PARTICLE_CHUNK * dim)
                        .zip(rngs.par_chunks_mut(PARTICLE_CHUNK))
                        .zip(acc.par_chunks_mut(PARTICLE_CHUNK))
                        .enumerate()
                        .for_each(|(c, ((xs, rs), accs))| {
                            let base = c * PARTICLE_CHUNK;
                            let mut scratch = init();
                            for (j, ((x, r), a)) in xs
                                .chunks_mut(dim)
                                .zip(rs.iter_mut())
                                .zip(accs.iter_mut())
                                .enumerate()
                            {
                                f(base + j, x, r, a, &mut scratch);
                            }
                        });
                });
                return;
            }
        }
        let mut scratch = init();
        for (i, ((x, r), a)) in states
            .chunks_mut(dim)
            .zip(rngs.iter_mut())
            .zip(acc.iter_mut())
            .enumerate()
        {
            f(i, x, r, a, &mut scratch);
        }
    }
}

impl std::fmt::Debug for Exec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Exec({} workers)", self.workers)
    }
}
