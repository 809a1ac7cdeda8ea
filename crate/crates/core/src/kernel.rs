//! Relaxed feedback controls.
//!
//! A control kernel is a measurable map `(t, x) -> probability on U`
//! restricted to a finite class: time cells (refined so every jump time of
//! the frozen common path is a cell edge), an axis-aligned partition of a
//! state box, and a finite control grid. Each (time, space) cell carries a
//! probability vector over the grid, stored sparsely because optimized
//! kernels concentrate on few atoms. States outside the box resolve to the
//! nearest boundary cell.

use crate::error::{CoreError, Result};
use crate::measures::WEIGHT_TOL;
use crate::model::Problem;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sparse probability vector over the control grid of one cell; entries are
/// sorted by grid index and sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDist {
    pub entries: Vec<(u32, f64)>,
}

impl CellDist {
    pub fn dirac(index: usize) -> Self {
        Self { entries: vec![(index as u32, 1.0)] }
    }

    pub fn validate(&self, n_grid: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(CoreError::InvalidKernel("empty cell distribution".into()));
        }
        let mut sum = 0.0;
        let mut prev: Option<u32> = None;
        for &(ix, p) in &self.entries {
            if ix as usize >= n_grid {
                return Err(CoreError::InvalidKernel(format!(
                    "grid index {ix} out of range {n_grid}"
                )));
            }
            if prev.is_some_and(|q| q >= ix) {
                return Err(CoreError::InvalidKernel("cell entries not sorted".into()));
            }
            if !(p >= 0.0) || !p.is_finite() {
                return Err(CoreError::InvalidKernel(format!("probability {p}")));
            }
            prev = Some(ix);
            sum += p;
        }
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(CoreError::InvalidKernel(format!("cell mass {sum}")));
        }
        Ok(())
    }

    /// Largest-probability grid index, smallest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = self.entries[0];
        for &e in &self.entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        best.0 as usize
    }

    pub fn entropy(&self) -> f64 {
        -self
            .entries
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(_, p)| p * p.ln())
            .sum::<f64>()
    }

    /// Inverse-CDF draw consuming exactly one uniform, so common-random-
    /// number comparisons stay aligned across kernels.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(ix, p) in &self.entries {
            acc += p;
            if u < acc {
                return ix as usize;
            }
        }
        self.entries.last().unwrap().0 as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlKernel {
    /// Strictly increasing, first = 0, last = horizon; every jump time of
    /// the path the kernel was built for is an edge.
    pub time_edges: Vec<f64>,
    pub space_lo: Vec<f64>,
    pub space_hi: Vec<f64>,
    pub cells_per_axis: Vec<usize>,
    pub dim_control: usize,
    /// `n_grid x dim_control`, row-major product grid.
    pub control_grid: Vec<f64>,
    /// time-major: `tc * n_space_cells + sc`.
    pub cells: Vec<CellDist>,
}

/// Geometric layout of a kernel (everything except the probabilities).
#[derive(Clone, Debug)]
pub struct KernelLayout {
    pub n_time_cells: usize,
    pub cells_per_axis: Vec<usize>,
    pub n_control_points: usize,
}

impl KernelLayout {
    pub fn new(n_time_cells: usize, space_cells: usize, n_control_points: usize) -> Self {
        Self {
            n_time_cells,
            cells_per_axis: vec![space_cells],
            n_control_points,
        }
    }
}

/// Uniform time edges on `[0, horizon]` with every jump time inserted.
pub fn refined_time_edges(n_base_cells: usize, horizon: f64, jump_times: &[f64]) -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=n_base_cells)
        .map(|k| horizon * k as f64 / n_base_cells as f64)
        .collect();
    for &t in jump_times {
        if t > 0.0 && t < horizon {
            match edges.binary_search_by(|e| e.total_cmp(&t)) {
                Ok(_) => {}
                Err(pos) => edges.insert(pos, t),
            }
        }
    }
    edges
}

impl ControlKernel {
    /// Cell geometry for `problem` against the jump times of one path.
    /// Space box per axis from [`Problem::state_box`]; control grid a
    /// product of uniform grids over the control box (odd counts put a grid
    /// point at the box center).
    fn geometry(problem: &Problem, layout: &KernelLayout, jump_times: &[f64]) -> Result<Self> {
        if layout.n_time_cells == 0
            || layout.n_control_points < 2
            || layout.cells_per_axis.iter().any(|&c| c == 0)
        {
            return Err(CoreError::InvalidKernel("degenerate kernel layout".into()));
        }
        let cells_per_axis = if layout.cells_per_axis.len() == problem.dim_state {
            layout.cells_per_axis.clone()
        } else {
            vec![layout.cells_per_axis[0]; problem.dim_state]
        };
        let (space_lo, space_hi) = problem.state_box();
        let time_edges = refined_time_edges(layout.n_time_cells, problem.horizon, jump_times);

        let l = layout.n_control_points;
        let dc = problem.dim_control;
        let n_grid = l.pow(dc as u32);
        let mut control_grid = vec![0.0; n_grid * dc];
        for g in 0..n_grid {
            let mut rem = g;
            for axis in (0..dc).rev() {
                let ix = rem % l;
                rem /= l;
                let (lo, hi) = (problem.control_lo[axis], problem.control_hi[axis]);
                control_grid[g * dc + axis] = lo + (hi - lo) * ix as f64 / (l - 1) as f64;
            }
        }
        Ok(Self {
            time_edges,
            space_lo,
            space_hi,
            cells_per_axis,
            dim_control: dc,
            control_grid,
            cells: Vec::new(),
        })
    }

    /// All cells Dirac at the central grid point.
    pub fn dirac_midpoint(
        problem: &Problem,
        layout: &KernelLayout,
        jump_times: &[f64],
    ) -> Result<Self> {
        let mut k = Self::geometry(problem, layout, jump_times)?;
        let mid = k.n_grid() / 2;
        k.cells = vec![CellDist::dirac(mid); k.n_time_cells() * k.n_space_cells()];
        k.validate()?;
        Ok(k)
    }

    /// Every cell an independent random mixture over `n_atoms` distinct grid
    /// points (a genuinely relaxed starting kernel for multi-start descent).
    pub fn random(
        problem: &Problem,
        layout: &KernelLayout,
        jump_times: &[f64],
        n_atoms: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut k = Self::geometry(problem, layout, jump_times)?;
        let n_grid = k.n_grid();
        let atoms = n_atoms.clamp(1, n_grid);
        let n_cells = k.n_time_cells() * k.n_space_cells();
        k.cells = (0..n_cells)
            .map(|_| {
                let mut picked: Vec<u32> = Vec::with_capacity(atoms);
                while picked.len() < atoms {
                    let ix = (rng.random::<f64>() * n_grid as f64) as u32;
                    let ix = ix.min(n_grid as u32 - 1);
                    if !picked.contains(&ix) {
                        picked.push(ix);
                    }
                }
                picked.sort_unstable();
                let raw: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 0.05).collect();
                let total: f64 = raw.iter().sum();
                let mut entries: Vec<(u32, f64)> =
                    picked.into_iter().zip(raw.into_iter().map(|w| w / total)).collect();
                // tidy the rounding so the row sums to one exactly
                let sum: f64 = entries.iter().map(|e| e.1).sum();
                if let Some(last) = entries.last_mut() {
                    last.1 += 1.0 - sum;
                }
                CellDist { entries }
            })
            .collect();
        k.validate()?;
        Ok(k)
    }

    pub fn n_grid(&self) -> usize {
        self.control_grid.len() / self.dim_control
    }

    pub fn n_time_cells(&self) -> usize {
        self.time_edges.len() - 1
    }

    pub fn n_space_cells(&self) -> usize {
        self.cells_per_axis.iter().product()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn control_point(&self, grid_index: usize) -> &[f64] {
        &self.control_grid[grid_index * self.dim_control..(grid_index + 1) * self.dim_control]
    }

    /// Cell of `t`: half-open `[e_k, e_{k+1})`, horizon mapped to the last cell.
    pub fn time_cell(&self, t: f64) -> usize {
        let n = self.n_time_cells();
        match self.time_edges.binary_search_by(|e| e.total_cmp(&t)) {
            Ok(k) => k.min(n - 1),
            Err(k) => (k - 1).min(n - 1),
        }
    }

    /// Flattened space cell with out-of-box states clamped to the boundary
    /// cell (the overflow cell inherits the nearest boundary vector).
    pub fn space_cell(&self, x: &[f64]) -> usize {
        let mut cell = 0;
        for axis in 0..x.len() {
            let c = self.cells_per_axis[axis];
            let w = (self.space_hi[axis] - self.space_lo[axis]) / c as f64;
            let raw = ((x[axis] - self.space_lo[axis]) / w).floor();
            let ix = (raw as isize).clamp(0, c as isize - 1) as usize;
            cell = cell * c + ix;
        }
        cell
    }

    pub fn cell(&self, tc: usize, sc: usize) -> &CellDist {
        &self.cells[tc * self.n_space_cells() + sc]
    }

    pub fn set_cell(&mut self, tc: usize, sc: usize, dist: CellDist) {
        let sc_total = self.n_space_cells();
        self.cells[tc * sc_total + sc] = dist;
    }

    /// `integral f(u) d(cell kernel)(u)`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, tc: usize, sc: usize, mut f: F) -> f64 {
        self.cell(tc, sc)
            .entries
            .iter()
            .map(|&(ix, p)| p * f(self.control_point(ix as usize)))
            .sum()
    }

    /// Collapse every cell to its argmax grid point (smallest index on
    /// ties): the strict-control projection of a relaxed kernel.
    pub fn strictify(&self) -> Self {
        let mut out = self.clone();
        for cell in out.cells.iter_mut() {
            *cell = CellDist::dirac(cell.argmax());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_edges.len() < 2
            || self.time_edges.windows(2).any(|w| w[1] <= w[0])
            || self.time_edges[0] != 0.0
        {
            return Err(CoreError::InvalidKernel("bad time edges".into()));
        }
        if self.cells.len() != self.n_time_cells() * self.n_space_cells() {
            return Err(CoreError::InvalidKernel(format!(
                "{} cells for {} x {} layout",
                self.cells.len(),
                self.n_time_cells(),
                self.n_space_cells()
            )));
        }
        let n_grid = self.n_grid();
        for c in &self.cells {
            c.validate(n_grid)?;
        }
        Ok(())
    }

    /// Kernels are interchangeable in a simulation only if their whole
    /// geometry matches (probabilities may differ).
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.time_edges == other.time_edges
            && self.space_lo == other.space_lo
            && self.space_hi == other.space_hi
            && self.cells_per_axis == other.cells_per_axis
            && self.control_grid == other.control_grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_problem, LqParams};
    use crate::rng::{substream1, tag};

    fn problem() -> crate::model::Problem {
        make_lq_problem(LqParams::default()).unwrap()
    }

    #[test]
    fn midpoint_kernel_is_dirac_at_zero() {
        let p = problem();
        let layout = KernelLayout::new(4, 6, 9);
        let k = ControlKernel::dirac_midpoint(&p, &layout, &[0.37]).unwrap();
        // control box is symmetric and 9 points include the center
        assert_eq!(k.cell(0, 0).entries.len(), 1);
        assert_eq!(k.control_point(k.cell(2, 3).argmax())[0], 0.0);
        // jump time became an edge
        assert!(k.time_edges.contains(&0.37));
        assert_eq!(k.n_time_cells(), 5);
    }

    #[test]
    fn time_and_space_cells_cover_everything() {
        let p = problem();
        let k = ControlKernel::dirac_midpoint(&p, &KernelLayout::new(4, 6, 9), &[]).unwrap();
        assert_eq!(k.time_cell(0.0), 0);
        assert_eq!(k.time_cell(1.0), 3); // horizon lands in the last cell
        assert_eq!(k.time_cell(0.25), 1);
        // clamping: far outside the box still yields a valid cell
        assert_eq!(k.space_cell(&[-1e9]), 0);
        assert_eq!(k.space_cell(&[1e9]), 5);
        for x in [-5.0, -0.3, 0.0, 1.0, 2.9, 7.0] {
            assert!(k.space_cell(&[x]) < k.n_space_cells());
        }
    }

    #[test]
    fn random_kernel_rows_sum_to_one_and_sample_respects_support() {
        let p = problem();
        let mut rng = substream1(4, tag::RESTART, 0);
        let k = ControlKernel::random(&p, &KernelLayout::new(3, 4, 17), &[0.5], 3, &mut rng).unwrap();
        k.validate().unwrap();
        let cell = k.cell(1, 2);
        let support: Vec<usize> = cell.entries.iter().map(|e| e.0 as usize).collect();
        let mut draw_rng = substream1(5, tag::NOISE, 0);
        for _ in 0..200 {
            assert!(support.contains(&cell.sample(&mut draw_rng)));
        }
    }

    #[test]
    fn strictify_collapses_to_argmax_with_smallest_index_ties() {
        let p = problem();
        let mut k = ControlKernel::dirac_midpoint(&p, &KernelLayout::new(2, 2, 5), &[]).unwrap();
        k.set_cell(0, 0, CellDist { entries: vec![(1, 0.25), (2, 0.5), (4, 0.25)] });
        k.set_cell(1, 1, CellDist { entries: vec![(0, 0.5), (3, 0.5)] });
        let s = k.strictify();
        assert_eq!(s.cell(0, 0).entries, vec![(2, 1.0)]);
        // tie between indices 0 and 3 resolves to 0
        assert_eq!(s.cell(1, 1).entries, vec![(0, 1.0)]);
        s.validate().unwrap();
    }

    #[test]
    fn entropy_of_dirac_is_zero_and_uniform_is_log_n() {
        let d = CellDist::dirac(3);
        assert_eq!(d.entropy(), 0.0);
        let u = CellDist { entries: (0..4).map(|i| (i, 0.25)).collect() };
        approx::assert_relative_eq!(u.entropy(), 4.0f64.ln(), max_relative = 1e-12);
    }
}
