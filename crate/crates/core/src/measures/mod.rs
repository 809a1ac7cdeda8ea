//! Empirical measures and distances.
//!
//! Laws are represented by weighted particle clouds. The flow of conditional
//! marginals produced by a simulation keeps one cloud per grid node plus the
//! left limit at every jump node, so both sides of a jump are available to
//! downstream consumers (jump maps take the pre-jump law, cost integrals the
//! post-jump one).
//!
//! Distances: squared-Wasserstein transport cost, computed exactly by
//! quantile coupling in one dimension and by a transportation simplex in
//! higher dimension (sliced approximation past a size cutoff), and a
//! restricted Skorokhod distance for cadlag paths whose time changes are
//! pinned to match jump times in order.

mod skorokhod;
mod transport;

pub use skorokhod::{skorokhod_distance_restricted, SkorokhodDistance};

use crate::error::{CoreError, Result};
use crate::fmt::g17;
use crate::rng::{substream1, tag};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Weight vectors must sum to one within this slack.
pub const WEIGHT_TOL: f64 = 1e-12;

/// Clouds larger than this (product of the two sizes) switch the
/// higher-dimensional Wasserstein computation from the exact transportation
/// simplex to the sliced approximation.
pub const EXACT_TRANSPORT_CUTOFF: usize = 4_000_000;

/// Projection count used by the sliced approximation.
pub const SLICED_PROJECTIONS: usize = 64;

/// A weighted particle cloud in `R^dim`, points stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let cloud = Self { dim, points, weights };
        cloud.view().validate()?;
        Ok(cloud)
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(CoreError::DimensionMismatch(format!(
                "{} coordinates do not fill dim-{} particles",
                points.len(),
                dim
            )));
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    /// One-dimensional convenience constructor.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::uniform(1, xs.to_vec())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn view(&self) -> CloudView<'_> {
        CloudView {
            dim: self.dim,
            points: &self.points,
            weights: &self.weights,
        }
    }
}

/// Borrowed cloud, the common currency of the distance routines.
#[derive(Clone, Copy, Debug)]
pub struct CloudView<'a> {
    pub dim: usize,
    pub points: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> CloudView<'a> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(CoreError::EmptyCloud);
        }
        if self.points.len() != self.len() * self.dim {
            return Err(CoreError::DimensionMismatch(format!(
                "{} coordinates for {} particles of dim {}",
                self.points.len(),
                self.len(),
                self.dim
            )));
        }
        if !self.points.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite {
                source_name: "particle cloud".into(),
                detail: "coordinate".into(),
            });
        }
        let mut sum = 0.0;
        for &w in self.weights {
            if !(w >= 0.0) {
                return Err(CoreError::BadWeights(w));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(CoreError::BadWeights(sum));
        }
        Ok(())
    }

    pub fn mean_into(&self, out: &mut [f64]) {
        out.fill(0.0);
        for (p, &w) in self.points.chunks_exact(self.dim).zip(self.weights) {
            for (o, &x) in out.iter_mut().zip(p) {
                *o += w * x;
            }
        }
    }

    /// `sum_i w_i |x_i|^2`.
    pub fn second_moment(&self) -> f64 {
        self.points
            .chunks_exact(self.dim)
            .zip(self.weights)
            .map(|(p, &w)| w * p.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// `( sum_i w_i |x_i|^p )^{1/p}` with the Euclidean norm, `p >= 1`.
pub fn moment(cloud: CloudView<'_>, p: f64) -> Result<f64> {
    cloud.validate()?;
    if !(p >= 1.0) {
        return Err(CoreError::InvalidConfig(format!("moment order p={p} < 1")));
    }
    let s: f64 = cloud
        .points
        .chunks_exact(cloud.dim)
        .zip(cloud.weights)
        .map(|(x, &w)| {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            w * norm.powf(p)
        })
        .sum();
    Ok(s.powf(1.0 / p))
}

/// The measure argument handed to problem coefficients: the cloud plus the
/// summary statistics every built-in coefficient actually reads. Statistics
/// are computed once per simulation step, not per particle.
#[derive(Clone, Copy, Debug)]
pub struct MeasureArg<'a> {
    pub cloud: CloudView<'a>,
    pub mean: &'a [f64],
    /// `sum w |x|^2`
    pub second_moment: f64,
}

impl<'a> MeasureArg<'a> {
    /// Scalar mean; panics unless dim == 1.
    pub fn mean1(&self) -> f64 {
        debug_assert_eq!(self.cloud.dim, 1);
        self.mean[0]
    }

    /// `M_2` = square root of the second moment.
    pub fn m2(&self) -> f64 {
        self.second_moment.sqrt()
    }
}

/// Precomputed per-node statistics backing [`MeasureArg`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeStats {
    pub mean: Vec<f64>,
    pub second_moment: f64,
}

impl NodeStats {
    pub fn of(cloud: CloudView<'_>) -> Self {
        let mut mean = vec![0.0; cloud.dim];
        cloud.mean_into(&mut mean);
        Self {
            mean,
            second_moment: cloud.second_moment(),
        }
    }
}

/// How the Wasserstein distance was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum W2Mode {
    Quantile1d,
    TransportLp,
    Sliced { projections: usize },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct W2Info {
    pub value: f64,
    pub mode: W2Mode,
}

/// Order-2 Wasserstein distance between weighted clouds.
pub fn wasserstein2(a: CloudView<'_>, b: CloudView<'_>) -> Result<f64> {
    Ok(wasserstein2_with_info(a, b)?.value)
}

/// As [`wasserstein2`], also reporting which mode produced the value.
pub fn wasserstein2_with_info(a: CloudView<'_>, b: CloudView<'_>) -> Result<W2Info> {
    a.validate()?;
    b.validate()?;
    if a.dim != b.dim {
        return Err(CoreError::DimensionMismatch(format!(
            "clouds of dim {} and {}",
            a.dim, b.dim
        )));
    }
    if a.dim == 1 {
        return Ok(W2Info {
            value: quantile_w2_1d(a.points, a.weights, b.points, b.weights).sqrt(),
            mode: W2Mode::Quantile1d,
        });
    }
    if a.len() * b.len() <= EXACT_TRANSPORT_CUTOFF {
        let value = transport::exact_w2(a, b)?;
        return Ok(W2Info {
            value,
            mode: W2Mode::TransportLp,
        });
    }
    Ok(W2Info {
        value: sliced_w2(a, b),
        mode: W2Mode::Sliced {
            projections: SLICED_PROJECTIONS,
        },
    })
}

/// Squared 1-d distance by coupling quantile functions: walk both sorted
/// clouds, always consuming the smaller remaining atom mass.
fn quantile_w2_1d(xs: &[f64], wx: &[f64], ys: &[f64], wy: &[f64]) -> f64 {
    let mut ix: Vec<usize> = (0..xs.len()).collect();
    let mut iy: Vec<usize> = (0..ys.len()).collect();
    ix.sort_unstable_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    iy.sort_unstable_by(|&i, &j| ys[i].total_cmp(&ys[j]));

    let mut cost = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut ra = wx[ix[0]];
    let mut rb = wy[iy[0]];
    loop {
        let m = ra.min(rb);
        let d = xs[ix[i]] - ys[iy[j]];
        cost += m * d * d;
        ra -= m;
        rb -= m;
        if ra <= 0.0 {
            i += 1;
            if i == ix.len() {
                break;
            }
            ra = wx[ix[i]];
        }
        if rb <= 0.0 {
            j += 1;
            if j == iy.len() {
                break;
            }
            rb = wy[iy[j]];
        }
    }
    cost.max(0.0)
}

/// Sliced approximation: average the squared 1-d distance of projections
/// onto directions drawn from a fixed stream, then take the square root.
fn sliced_w2(a: CloudView<'_>, b: CloudView<'_>) -> f64 {
    let mut rng = substream1(0x51_1C_ED, tag::PROBE, a.dim as u64);
    let mut acc = 0.0;
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    let mut dir = vec![0.0f64; a.dim];
    for _ in 0..SLICED_PROJECTIONS {
        let mut norm = 0.0;
        for d in dir.iter_mut() {
            *d = StandardNormal.sample(&mut rng);
            norm += *d * *d;
        }
        let norm = norm.sqrt().max(f64::MIN_POSITIVE);
        for d in dir.iter_mut() {
            *d /= norm;
        }
        for (o, p) in pa.iter_mut().zip(a.points.chunks_exact(a.dim)) {
            *o = p.iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        for (o, p) in pb.iter_mut().zip(b.points.chunks_exact(b.dim)) {
            *o = p.iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        acc += quantile_w2_1d(&pa, a.weights, &pb, b.weights);
    }
    (acc / SLICED_PROJECTIONS as f64).sqrt()
}

/// A jump node of a flow: the node index into the grid and the pre-jump
/// cloud coordinates (weights are shared with the post-jump cloud).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowJump {
    pub node: usize,
    pub left_points: Vec<f64>,
    pub left_stats: NodeStats,
}

/// Flow of conditional marginals on a time grid: one cloud per node, with
/// pre-jump left limits kept at jump nodes. All nodes share one weight
/// vector and particle count (particles never die or split here).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureFlow {
    pub times: Vec<f64>,
    pub dim: usize,
    pub weights: Vec<f64>,
    /// nodes x particles x dim
    data: Vec<f64>,
    jumps: Vec<FlowJump>,
    stats: Vec<NodeStats>,
}

impl MeasureFlow {
    pub fn from_parts(
        times: Vec<f64>,
        dim: usize,
        weights: Vec<f64>,
        data: Vec<f64>,
        jumps: Vec<FlowJump>,
    ) -> Result<Self> {
        let n = weights.len();
        if data.len() != times.len() * n * dim {
            return Err(CoreError::DimensionMismatch(format!(
                "flow data length {} != nodes {} x particles {n} x dim {dim}",
                data.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::GridMismatch("times not strictly increasing".into()));
        }
        for j in &jumps {
            if j.node >= times.len() || j.left_points.len() != n * dim {
                return Err(CoreError::GridMismatch("jump node out of range".into()));
            }
        }
        let mut flow = Self {
            times,
            dim,
            weights,
            data,
            jumps,
            stats: Vec::new(),
        };
        flow.cloud_at(0).validate()?;
        flow.stats = (0..flow.times.len())
            .map(|k| NodeStats::of(flow.cloud_at(k)))
            .collect();
        Ok(flow)
    }

    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn n_particles(&self) -> usize {
        self.weights.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn cloud_at(&self, node: usize) -> CloudView<'_> {
        let stride = self.n_particles() * self.dim;
        CloudView {
            dim: self.dim,
            points: &self.data[node * stride..(node + 1) * stride],
            weights: &self.weights,
        }
    }

    pub fn measure_at(&self, node: usize) -> MeasureArg<'_> {
        MeasureArg {
            cloud: self.cloud_at(node),
            mean: &self.stats[node].mean,
            second_moment: self.stats[node].second_moment,
        }
    }

    pub fn jumps(&self) -> &[FlowJump] {
        &self.jumps
    }

    /// Pre-jump measure at a jump node; `None` when the node carries no jump.
    pub fn left_measure_at(&self, node: usize) -> Option<MeasureArg<'_>> {
        self.jumps.iter().find(|j| j.node == node).map(|j| MeasureArg {
            cloud: CloudView {
                dim: self.dim,
                points: &j.left_points,
                weights: &self.weights,
            },
            mean: &j.left_stats.mean,
            second_moment: j.left_stats.second_moment,
        })
    }

    pub fn stats_at(&self, node: usize) -> &NodeStats {
        &self.stats[node]
    }

    /// New flow taking the trajectories of `count` particles starting at
    /// index `start` (wrapping around) from `donor` and the rest from
    /// `self`. Node by node this realizes the measure mixture
    /// `(count/n) donor + (1 - count/n) self` as a valid particle flow
    /// (particle indices are exchangeable); advancing `start` between
    /// repeated splices cycles through the whole population. Both flows
    /// must share the grid, dimension, weights, and jump nodes.
    pub fn splice(&self, donor: &MeasureFlow, start: usize, count: usize) -> Result<MeasureFlow> {
        let n = self.n_particles();
        if donor.n_particles() != n
            || donor.dim != self.dim
            || donor.times != self.times
            || donor.weights != self.weights
        {
            return Err(CoreError::GridMismatch(
                "spliced flows must share grid, dimension, and weights".into(),
            ));
        }
        if donor.jumps.len() != self.jumps.len()
            || donor.jumps.iter().zip(&self.jumps).any(|(a, b)| a.node != b.node)
        {
            return Err(CoreError::GridMismatch("spliced flows disagree on jump nodes".into()));
        }
        let count = count.min(n);
        let start = start % n;
        // up to two contiguous particle index ranges, in dim-scaled units
        let first_len = count.min(n - start);
        let ranges = [
            (start * self.dim, (start + first_len) * self.dim),
            (0, (count - first_len) * self.dim),
        ];
        let stride = n * self.dim;
        let mut data = self.data.clone();
        for node in 0..self.n_nodes() {
            let o = node * stride;
            for &(lo, hi) in &ranges {
                data[o + lo..o + hi].copy_from_slice(&donor.data[o + lo..o + hi]);
            }
        }
        let jumps = self
            .jumps
            .iter()
            .zip(&donor.jumps)
            .map(|(own, don)| {
                let mut left_points = own.left_points.clone();
                for &(lo, hi) in &ranges {
                    left_points[lo..hi].copy_from_slice(&don.left_points[lo..hi]);
                }
                let left_stats = NodeStats::of(CloudView {
                    dim: self.dim,
                    points: &left_points,
                    weights: &self.weights,
                });
                FlowJump { node: own.node, left_points, left_stats }
            })
            .collect();
        Self::from_parts(self.times.clone(), self.dim, self.weights.clone(), data, jumps)
    }
}

/// A jump of a single cadlag path: grid node index and the left limit there.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathJump {
    pub node: usize,
    pub left: Vec<f64>,
}

/// One cadlag trajectory sampled on a grid. Between nodes the path is read
/// as linear; at a jump node the stored value is the post-jump state and
/// `jumps` carries the left limit, so the path can be evaluated exactly on
/// either side of every jump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PiecewisePath {
    pub times: Vec<f64>,
    pub dim: usize,
    /// nodes x dim
    pub values: Vec<f64>,
    pub jumps: Vec<PathJump>,
}

impl PiecewisePath {
    pub fn new(times: Vec<f64>, dim: usize, values: Vec<f64>, jumps: Vec<PathJump>) -> Result<Self> {
        if values.len() != times.len() * dim {
            return Err(CoreError::DimensionMismatch(format!(
                "{} values for {} nodes of dim {dim}",
                values.len(),
                times.len()
            )));
        }
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::GridMismatch("times not strictly increasing".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite {
                source_name: "piecewise path".into(),
                detail: "value".into(),
            });
        }
        for j in &jumps {
            if j.node == 0 || j.node >= times.len() || j.left.len() != dim {
                return Err(CoreError::GridMismatch(format!(
                    "path jump at node {} out of range",
                    j.node
                )));
            }
        }
        if jumps.windows(2).any(|w| w[1].node <= w[0].node) {
            return Err(CoreError::GridMismatch("path jumps not sorted".into()));
        }
        Ok(Self { times, dim, values, jumps })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.jumps.iter().map(|j| self.times[j.node]).collect()
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    fn segment_index(&self, t: f64) -> usize {
        // rightmost k with times[k] <= t, capped so k+1 is valid
        match self.times.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(k) => k.min(self.times.len() - 2),
            Err(k) => k.saturating_sub(1).min(self.times.len() - 2),
        }
    }

    /// Cadlag evaluation at `t` (clamped to the time span).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(self.times[0], self.horizon());
        // exact hit on a node returns the stored (post-jump) value
        if let Ok(k) = self.times.binary_search_by(|v| v.total_cmp(&t)) {
            out.copy_from_slice(self.value(k));
            return;
        }
        let k = self.segment_index(t);
        self.interp_segment(k, t, out);
    }

    /// Left limit at `t`: differs from `eval_into` only at jump nodes.
    pub fn eval_left_into(&self, t: f64, out: &mut [f64]) {
        let t = t.clamp(self.times[0], self.horizon());
        if let Ok(k) = self.times.binary_search_by(|v| v.total_cmp(&t)) {
            if let Some(j) = self.jumps.iter().find(|j| j.node == k) {
                out.copy_from_slice(&j.left);
                return;
            }
            out.copy_from_slice(self.value(k));
            return;
        }
        let k = self.segment_index(t);
        self.interp_segment(k, t, out);
    }

    /// Linear interpolation on `[times[k], times[k+1]]`, approaching the
    /// left limit when node `k+1` is a jump.
    fn interp_segment(&self, k: usize, t: f64, out: &mut [f64]) {
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let theta = (t - t0) / (t1 - t0);
        let right: &[f64] = match self.jumps.iter().find(|j| j.node == k + 1) {
            Some(j) => &j.left,
            None => self.value(k + 1),
        };
        for ((o, &a), &b) in out.iter_mut().zip(self.value(k)).zip(right) {
            *o = (1.0 - theta) * a + theta * b;
        }
    }
}

/// Write a cloud as CSV rows `time,index,x...,weight` (17 significant
/// digits, so values round-trip exactly).
pub fn write_cloud_csv<W: std::io::Write>(
    out: &mut W,
    time: f64,
    cloud: CloudView<'_>,
) -> std::io::Result<()> {
    for i in 0..cloud.len() {
        write!(out, "{},{}", g17(time), i)?;
        for x in cloud.point(i) {
            write!(out, ",{}", g17(*x))?;
        }
        writeln!(out, ",{}", g17(cloud.weights[i]))?;
    }
    Ok(())
}

/// Write every node of a flow as CSV, with a header row.
pub fn write_flow_csv<W: std::io::Write>(out: &mut W, flow: &MeasureFlow) -> std::io::Result<()> {
    write!(out, "time,index")?;
    for d in 0..flow.dim {
        write!(out, ",x{d}")?;
    }
    writeln!(out, ",weight")?;
    for k in 0..flow.n_nodes() {
        write_cloud_csv(out, flow.times[k], flow.cloud_at(k))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cloud1(xs: &[f64]) -> ParticleCloud {
        ParticleCloud::from_scalars(xs).unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        let bad = ParticleCloud::new(1, vec![0.0, 1.0], vec![0.6, 0.6]);
        assert!(matches!(bad, Err(CoreError::BadWeights(_))));
        let ok = ParticleCloud::new(1, vec![0.0, 1.0], vec![0.25, 0.75]);
        assert!(ok.is_ok());
    }

    #[test]
    fn moment_matches_direct_power_sum() {
        // uniform on {0,1,2,3}: fourth moment (0+1+16+81)/4 = 24.5
        let c = cloud1(&[0.0, 1.0, 2.0, 3.0]);
        let m4 = moment(c.view(), 4.0).unwrap();
        assert_relative_eq!(m4, 24.5f64.powf(0.25), max_relative = 1e-14);
        let m1 = moment(c.view(), 1.0).unwrap();
        assert_relative_eq!(m1, 1.5, max_relative = 1e-14);
    }

    #[test]
    fn w2_shifted_uniform_pair() {
        // uniform{0,2} vs uniform{1,3}: monotone coupling costs 1, the
        // crossed coupling (0->3, 2->1) costs sqrt(5); distance is 1.
        let a = cloud1(&[0.0, 2.0]);
        let b = cloud1(&[1.0, 3.0]);
        let info = wasserstein2_with_info(a.view(), b.view()).unwrap();
        assert_eq!(info.mode, W2Mode::Quantile1d);
        assert_relative_eq!(info.value, 1.0, max_relative = 1e-14);
        let monotone = ((1.0f64 + 1.0) / 2.0).sqrt();
        let crossed = ((9.0f64 + 1.0) / 2.0).sqrt();
        assert!(monotone < crossed);
        assert_relative_eq!(info.value, monotone, max_relative = 1e-14);
    }

    #[test]
    fn w2_weighted_atoms() {
        // (3/4)delta_0 + (1/4)delta_4  vs  delta_1: quantile coupling moves
        // 3/4 mass by 1 and 1/4 mass by 3.
        let a = ParticleCloud::new(1, vec![0.0, 4.0], vec![0.75, 0.25]).unwrap();
        let b = ParticleCloud::new(1, vec![1.0], vec![1.0]).unwrap();
        let d = wasserstein2(a.view(), b.view()).unwrap();
        assert_relative_eq!(d, (0.75 + 0.25 * 9.0f64).sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn w2_identical_clouds_is_zero() {
        let a = cloud1(&[0.3, -1.2, 5.0, 0.3]);
        assert_eq!(wasserstein2(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn flow_left_limits_are_exposed() {
        let times = vec![0.0, 0.5, 1.0];
        let data = vec![0.0, 0.0, /* t=0 */ 1.1, 1.1, /* t=0.5 post-jump */ 1.1, 1.1];
        let left = vec![1.0, 1.0];
        let jumps = vec![FlowJump {
            node: 1,
            left_stats: NodeStats::of(CloudView { dim: 1, points: &left, weights: &[0.5, 0.5] }),
            left_points: left.clone(),
        }];
        let flow = MeasureFlow::from_parts(times, 1, vec![0.5, 0.5], data, jumps).unwrap();
        assert_eq!(flow.left_measure_at(1).unwrap().mean1(), 1.0);
        assert!(flow.left_measure_at(0).is_none());
        assert_relative_eq!(flow.measure_at(1).mean1(), 1.1, max_relative = 1e-15);
    }

    #[test]
    fn path_evaluation_respects_sides_of_jump() {
        // linear 0 -> 0.5 on [0, 0.5), jump to 2 at t=0.5, constant after
        let p = PiecewisePath::new(
            vec![0.0, 0.5, 1.0],
            1,
            vec![0.0, 2.0, 2.0],
            vec![PathJump { node: 1, left: vec![0.5] }],
        )
        .unwrap();
        let mut v = [0.0];
        p.eval_into(0.25, &mut v);
        assert_relative_eq!(v[0], 0.25, max_relative = 1e-15);
        p.eval_into(0.5, &mut v);
        assert_eq!(v[0], 2.0);
        p.eval_left_into(0.5, &mut v);
        assert_eq!(v[0], 0.5);
        p.eval_into(0.75, &mut v);
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn cloud_csv_round_trip_digits() {
        let c = ParticleCloud::new(1, vec![std::f64::consts::PI], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_cloud_csv(&mut buf, 0.125, c.view()).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let x: f64 = line.trim().split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(x, std::f64::consts::PI);
    }
}
