//! Restricted Skorokhod distance between cadlag paths.
//!
//! The classical distance infimises `||delta - id|| + ||x - y o delta||`
//! over all time changes. Here the paths come from simulations driven by a
//! common jump path, so the natural class of time changes is tiny: piecewise
//! linear, pinned at the endpoints, and sending the i-th jump time of `x` to
//! the i-th jump time of `y`. That class contains exactly one candidate,
//! which makes the distance exact (within the class) and cheap. When the
//! jump counts differ no such time change exists and the identity is used
//! instead; the result records that fallback.

use super::PiecewisePath;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug)]
pub struct SkorokhodDistance {
    pub value: f64,
    /// `sup |delta(t) - t|` of the time change used.
    pub time_change_sup: f64,
    /// `sup |x(t) - y(delta(t))|` (Euclidean norm in space).
    pub state_sup: f64,
    /// True when jump counts differed and the identity time change was used.
    pub identity_fallback: bool,
}

pub fn skorokhod_distance_restricted(
    x: &PiecewisePath,
    y: &PiecewisePath,
) -> Result<SkorokhodDistance> {
    if x.dim != y.dim {
        return Err(CoreError::DimensionMismatch(format!(
            "paths of dim {} and {}",
            x.dim, y.dim
        )));
    }
    if x.start_time() != y.start_time() || x.horizon() != y.horizon() {
        return Err(CoreError::GridMismatch(format!(
            "paths live on [{}, {}] and [{}, {}]",
            x.start_time(),
            x.horizon(),
            y.start_time(),
            y.horizon()
        )));
    }
    let jx = x.jump_times();
    let jy = y.jump_times();
    let anchored = jx.len() == jy.len() && breakpoints_ok(x, &jx) && breakpoints_ok(y, &jy);

    let (sx, sy): (Vec<f64>, Vec<f64>) = if anchored {
        let mut a = vec![x.start_time()];
        a.extend_from_slice(&jx);
        a.push(x.horizon());
        let mut b = vec![y.start_time()];
        b.extend_from_slice(&jy);
        b.push(y.horizon());
        (a, b)
    } else {
        (
            vec![x.start_time(), x.horizon()],
            vec![y.start_time(), y.horizon()],
        )
    };

    let time_change_sup = sx
        .iter()
        .zip(&sy)
        .map(|(s, r)| (r - s).abs())
        .fold(0.0f64, f64::max);

    let delta = |t: f64| piecewise_linear(&sx, &sy, t);
    let delta_inv = |u: f64| piecewise_linear(&sy, &sx, u);

    let mut vx = vec![0.0; x.dim];
    let mut vy = vec![0.0; x.dim];
    let mut state_sup = 0.0f64;
    let consider = |a: &[f64], b: &[f64], sup: &mut f64| {
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if d > *sup {
            *sup = d;
        }
    };

    // Right-continuous values at x's nodes against y at delta(t)...
    for &t in &x.times {
        x.eval_into(t, &mut vx);
        y.eval_into(delta(t), &mut vy);
        consider(&vx, &vy, &mut state_sup);
    }
    // ...and at y's nodes pulled back through delta.
    for &u in &y.times {
        x.eval_into(delta_inv(u), &mut vx);
        y.eval_into(u, &mut vy);
        consider(&vx, &vy, &mut state_sup);
    }
    // Left limits on both sides of every jump pair (or of every individual
    // jump under the identity fallback).
    if anchored {
        for (s, r) in jx.iter().zip(&jy) {
            x.eval_left_into(*s, &mut vx);
            y.eval_left_into(*r, &mut vy);
            consider(&vx, &vy, &mut state_sup);
        }
    } else {
        for &t in jx.iter().chain(&jy) {
            x.eval_left_into(t, &mut vx);
            y.eval_left_into(t, &mut vy);
            consider(&vx, &vy, &mut state_sup);
        }
    }

    Ok(SkorokhodDistance {
        value: time_change_sup + state_sup,
        time_change_sup,
        state_sup,
        identity_fallback: !anchored,
    })
}

/// The anchored time change needs strictly interior, strictly increasing
/// jump times to be a valid homeomorphism of the span.
fn breakpoints_ok(p: &PiecewisePath, jumps: &[f64]) -> bool {
    let mut prev = p.start_time();
    for &t in jumps {
        if t <= prev || t >= p.horizon() {
            return false;
        }
        prev = t;
    }
    true
}

/// Increasing piecewise-linear map through `(xs[i], ys[i])`.
fn piecewise_linear(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let t = t.clamp(xs[0], *xs.last().unwrap());
    let k = match xs.binary_search_by(|v| v.total_cmp(&t)) {
        Ok(k) => return ys[k],
        Err(k) => k - 1,
    };
    let w = (t - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + w * (ys[k + 1] - ys[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::PathJump;
    use approx::assert_relative_eq;

    fn step_path(at: f64, height: f64) -> PiecewisePath {
        PiecewisePath::new(
            vec![0.0, at, 1.0],
            1,
            vec![0.0, height, height],
            vec![PathJump { node: 1, left: vec![0.0] }],
        )
        .unwrap()
    }

    #[test]
    fn shifted_unit_steps_cost_only_the_time_shift() {
        let x = step_path(0.4, 1.0);
        let y = step_path(0.5, 1.0);
        let d = skorokhod_distance_restricted(&x, &y).unwrap();
        assert!(!d.identity_fallback);
        assert_relative_eq!(d.time_change_sup, 0.1, max_relative = 1e-12);
        assert!(d.state_sup < 1e-12, "state sup {}", d.state_sup);
        assert_relative_eq!(d.value, 0.1, max_relative = 1e-12);
        // symmetric
        let back = skorokhod_distance_restricted(&y, &x).unwrap();
        assert_relative_eq!(back.value, d.value, max_relative = 1e-12);
    }

    #[test]
    fn constant_paths_measure_sup_gap() {
        let x = PiecewisePath::new(vec![0.0, 1.0], 1, vec![0.0, 0.0], vec![]).unwrap();
        let y = PiecewisePath::new(vec![0.0, 1.0], 1, vec![0.3, 0.3], vec![]).unwrap();
        let d = skorokhod_distance_restricted(&x, &y).unwrap();
        assert_relative_eq!(d.value, 0.3, max_relative = 1e-12);
        assert_eq!(d.time_change_sup, 0.0);
    }

    #[test]
    fn identical_paths_have_zero_distance() {
        let x = step_path(0.25, -2.0);
        let d = skorokhod_distance_restricted(&x, &x).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn mismatched_jump_counts_fall_back_to_identity() {
        let x = step_path(0.4, 1.0);
        let y = PiecewisePath::new(vec![0.0, 1.0], 1, vec![0.0, 0.0], vec![]).unwrap();
        let d = skorokhod_distance_restricted(&x, &y).unwrap();
        assert!(d.identity_fallback);
        assert_eq!(d.time_change_sup, 0.0);
        assert_relative_eq!(d.value, 1.0, max_relative = 1e-12);
    }
}
