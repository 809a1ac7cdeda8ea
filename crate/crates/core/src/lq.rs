//! Closed-form references for the scalar linear-quadratic benchmarks.
//!
//! For dynamics `dx = (a x + g u) dt + sigma dW` with multiplicative jumps
//! `x -> (1 + c) x` at the frozen jump times, and cost
//! `integral q (x - s mbar(t))^2 + r u^2 dt`, the value function of the
//! deterministic-jump problem is `V(t, x) = P(t) x^2 + 2 h(t) x + l(t)`
//! where, between jumps,
//!
//! ```text
//! P' = -2 a P + (g^2 / r) P^2 - q                         P(T) = 0
//! h' = -a h + (g^2 / r) P h + q s mbar(t)                 h(T) = 0
//! l' = (g^2 / r) h^2 - sigma^2 P - q s^2 mbar(t)^2        l(T) = 0
//! ```
//!
//! and crossing a jump time backward multiplies `P` by `(1 + c)^2` and `h`
//! by `(1 + c)` (from `V(t-, x) = V(t, (1 + c) x)`), leaving `l` alone. The
//! optimal feedback is `u*(t, x) = -(g / r) (P(t) x + h(t))` and the value
//! under an initial law with mean `m` and variance `v` is
//! `P(0)(m^2 + v) + 2 h(0) m + l(0)`.
//!
//! The backward system is integrated by classical Runge-Kutta on a grid
//! refined at the jump times; `mbar` enters through a piecewise-linear
//! cadlag path (for mean-field tracking the frozen population mean), `None`
//! meaning `mbar = 0`.

use crate::dynamics::SimGrid;
use crate::error::{CoreError, Result};
use crate::measures::{MeasureFlow, PathJump, PiecewisePath};
use crate::model::LqParams;
use crate::noise::{PointEvent, PointPath};

/// Backward solution on a refined grid. Node values are right limits; at
/// jump nodes the pre-jump (left) values of `P` and `h` are kept alongside.
#[derive(Clone, Debug)]
pub struct LqBackward {
    pub params: LqParams,
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub h: Vec<f64>,
    pub l: Vec<f64>,
    pub jump_nodes: Vec<usize>,
    pub p_left: Vec<f64>,
    pub h_left: Vec<f64>,
}

impl LqBackward {
    /// Expected optimal cost for an initial law with the given mean and
    /// variance.
    pub fn value(&self, mean: f64, variance: f64) -> f64 {
        self.p[0] * (mean * mean + variance) + 2.0 * self.h[0] * mean + self.l[0]
    }

    /// `P` and `h` at `t` inside segment `[times[seg], times[seg + 1]]`,
    /// interpolated linearly and approaching the pre-jump values when the
    /// right endpoint is a jump node.
    pub fn p_h_on_segment(&self, seg: usize, t: f64) -> (f64, f64) {
        let (t0, t1) = (self.times[seg], self.times[seg + 1]);
        let theta = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let (p1, h1) = match self.jump_nodes.binary_search(&(seg + 1)) {
            Ok(k) => (self.p_left[k], self.h_left[k]),
            Err(_) => (self.p[seg + 1], self.h[seg + 1]),
        };
        (
            self.p[seg] + theta * (p1 - self.p[seg]),
            self.h[seg] + theta * (h1 - self.h[seg]),
        )
    }

    /// Optimal feedback `u*(t, x)` for `t` inside the given segment.
    pub fn feedback_on_segment(&self, seg: usize, t: f64, x: f64) -> f64 {
        let (p, h) = self.p_h_on_segment(seg, t);
        -(self.params.control_gain / self.params.cost_r) * (p * x + h)
    }
}

/// Integrate the backward system for the given jump times.
pub fn solve_lq_backward(
    params: &LqParams,
    jump_times: &[f64],
    mbar: Option<&PiecewisePath>,
    dt: f64,
) -> Result<LqBackward> {
    if !(params.cost_r > 0.0) {
        return Err(CoreError::InvalidProblem(format!(
            "control cost weight {} must be positive",
            params.cost_r
        )));
    }
    if let Some(m) = mbar {
        if m.dim != 1 {
            return Err(CoreError::DimensionMismatch("mean path must be scalar".into()));
        }
    }
    let horizon = params.horizon;
    let synthetic = PointPath::new(
        horizon,
        jump_times
            .iter()
            .map(|&t| PointEvent { time: t, mark: vec![0.0] })
            .collect(),
    )?;
    let grid = SimGrid::build(dt, &synthetic)?;
    let times = grid.times.clone();
    let n = times.len();
    let jump_node_set: Vec<usize> = grid.jump_nodes.iter().map(|&(j, _)| j).collect();

    let a = params.drift_a;
    let gr = params.control_gain * params.control_gain / params.cost_r;
    let q = params.cost_q;
    let s = params.mean_coupling;
    let sig2 = params.sigma * params.sigma;
    let jump_p = (1.0 + params.jump_scale) * (1.0 + params.jump_scale);
    let jump_h = 1.0 + params.jump_scale;

    let mean_at = |t: f64, left: bool| -> f64 {
        match mbar {
            None => 0.0,
            Some(path) => {
                let mut out = [0.0];
                if left {
                    path.eval_left_into(t, &mut out);
                } else {
                    path.eval_into(t, &mut out);
                }
                out[0]
            }
        }
    };
    let rhs = |t: f64, y: [f64; 3], left: bool| -> [f64; 3] {
        let m = mean_at(t, left);
        let [p, h, _] = y;
        [
            -2.0 * a * p + gr * p * p - q,
            -a * h + gr * p * h + q * s * m,
            gr * h * h - sig2 * p - q * s * s * m * m,
        ]
    };

    let mut p = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mut l = vec![0.0; n];
    let mut p_left = vec![0.0; jump_node_set.len()];
    let mut h_left = vec![0.0; jump_node_set.len()];
    let mut y = [0.0f64; 3];
    for j in (0..n - 1).rev() {
        // crossing node j + 1 leftward: apply the backward jump update
        if let Ok(k) = jump_node_set.binary_search(&(j + 1)) {
            y[0] *= jump_p;
            y[1] *= jump_h;
            p_left[k] = y[0];
            h_left[k] = y[1];
        }
        let (lo, hi) = (times[j], times[j + 1]);
        let step = hi - lo;
        let mid = hi - 0.5 * step;
        let k1 = rhs(hi, y, true);
        let k2 = rhs(mid, sub(y, scale(k1, 0.5 * step)), false);
        let k3 = rhs(mid, sub(y, scale(k2, 0.5 * step)), false);
        let k4 = rhs(lo, sub(y, scale(k3, step)), false);
        for d in 0..3 {
            y[d] -= step / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        p[j] = y[0];
        h[j] = y[1];
        l[j] = y[2];
    }
    // terminal values (already zero) and any jump exactly at the horizon
    // (which does not change a zero terminal value) are in place.
    Ok(LqBackward {
        params: params.clone(),
        times,
        p,
        h,
        l,
        jump_nodes: jump_node_set,
        p_left,
        h_left,
    })
}

fn scale(y: [f64; 3], c: f64) -> [f64; 3] {
    [y[0] * c, y[1] * c, y[2] * c]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Scalar mean path of a flow as a cadlag piecewise-linear path (the
/// `mbar` input for mean-field tracking references).
pub fn flow_mean_path(flow: &MeasureFlow) -> Result<PiecewisePath> {
    if flow.dim != 1 {
        return Err(CoreError::DimensionMismatch("flow must be scalar".into()));
    }
    let values: Vec<f64> = (0..flow.n_nodes()).map(|j| flow.stats_at(j).mean[0]).collect();
    let jumps = flow
        .jumps()
        .iter()
        .map(|j| PathJump { node: j.node, left: vec![j.left_stats.mean[0]] })
        .collect();
    PiecewisePath::new(flow.times.clone(), 1, values, jumps)
}
