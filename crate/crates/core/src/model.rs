//! Problem definition: controlled McKean-Vlasov dynamics with Brownian
//! idiosyncratic noise and deterministic jump response to a common point
//! path,
//!
//! ```text
//! dX_t = b(t, X, mu, u) dt + sigma(t, X, mu, u) dW_t + gamma(t, X-, mu-, z) dN,
//! ```
//!
//! minimising `E  integral_0^T f(t, X, mu, u) dt`. Coefficients receive the
//! conditional law as a particle cloud with precomputed summary statistics.
//!
//! The module also carries the closed-form linear-quadratic benchmarks the
//! verification suite leans on, a generator evaluation for quadratic test
//! functions, and a sampling-based audit of the standing Lipschitz / growth
//! assumptions with one shared constant `M`.

use crate::error::{CoreError, Result};
use crate::measures::{wasserstein2, MeasureArg, NodeStats, ParticleCloud};
use crate::noise::{IntensitySpec, MarkDistribution};
use crate::rng::{substream, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Problem coefficients. Outputs are written into caller buffers so the hot
/// simulation loops stay allocation-free; implementations must be pure.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], mu: &MeasureArg<'_>, u: &[f64], out: &mut [f64]);
    /// `dim_state x dim_noise`, row-major.
    fn diffusion(&self, t: f64, x: &[f64], mu: &MeasureArg<'_>, u: &[f64], out: &mut [f64]);
    /// Jump response to mark `z`; evaluated at the left limit of state and law.
    fn jump(&self, t: f64, x: &[f64], mu: &MeasureArg<'_>, z: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], mu: &MeasureArg<'_>, u: &[f64]) -> f64;
}

/// Initial law of the state.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InitialLaw {
    GaussianDiag { mean: Vec<f64>, std: Vec<f64> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianDiag { mean, .. } => mean.len(),
            Self::UniformBox { lo, .. } => lo.len(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Self::GaussianDiag { mean, .. } => mean.clone(),
            Self::UniformBox { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()
            }
        }
    }

    pub fn std(&self) -> Vec<f64> {
        match self {
            Self::GaussianDiag { std, .. } => std.clone(),
            Self::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| (h - l) / 12.0_f64.sqrt())
                .collect(),
        }
    }

    pub fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Self::GaussianDiag { mean, std } => {
                for ((o, &m), &s) in out.iter_mut().zip(mean).zip(std) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = m + s * z;
                }
            }
            Self::UniformBox { lo, hi } => {
                for ((o, &l), &h) in out.iter_mut().zip(lo).zip(hi) {
                    *o = l + (h - l) * rng.random::<f64>();
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::GaussianDiag { mean, std } => {
                if mean.is_empty() || mean.len() != std.len() {
                    return Err(CoreError::DimensionMismatch("initial law".into()));
                }
                if std.iter().any(|s| !(*s >= 0.0)) {
                    return Err(CoreError::InvalidProblem("initial std < 0".into()));
                }
            }
            Self::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| l >= h) {
                    return Err(CoreError::InvalidProblem("initial box".into()));
                }
            }
        }
        Ok(())
    }
}

/// A complete control problem instance.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub dim_state: usize,
    pub dim_noise: usize,
    pub dim_control: usize,
    pub horizon: f64,
    /// Order `p` used by the per-jump moment recursion checks.
    pub moment_order: f64,
    /// The shared constant `M` of the Lipschitz / jump-growth assumptions.
    pub declared_lipschitz: f64,
    /// Admissible controls: an axis-aligned box.
    pub control_lo: Vec<f64>,
    pub control_hi: Vec<f64>,
    pub intensity: IntensitySpec,
    pub initial: InitialLaw,
    pub coeffs: Arc<dyn Coefficients>,
    /// Populated when the instance is a closed-form benchmark, so oracles
    /// can recover the scalar parameters.
    pub lq: Option<LqParams>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if self.dim_state == 0 || self.dim_noise == 0 || self.dim_control == 0 {
            return Err(CoreError::InvalidProblem("zero dimension".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(CoreError::InvalidProblem(format!("horizon {}", self.horizon)));
        }
        if !(self.moment_order >= 2.0) {
            return Err(CoreError::InvalidProblem(format!(
                "moment order {} < 2",
                self.moment_order
            )));
        }
        if !(self.declared_lipschitz > 0.0) {
            return Err(CoreError::InvalidProblem("declared Lipschitz constant".into()));
        }
        if self.control_lo.len() != self.dim_control
            || self.control_hi.len() != self.dim_control
            || self.control_lo.iter().zip(&self.control_hi).any(|(l, h)| l >= h)
        {
            return Err(CoreError::InvalidProblem("control box".into()));
        }
        if self.initial.dim() != self.dim_state {
            return Err(CoreError::DimensionMismatch("initial law dim".into()));
        }
        self.initial.validate()?;
        self.intensity.validate()
    }

    /// Copy of the problem with the initial law translated by `delta`
    /// (Gaussians shift their mean, boxes shift both faces). A linear-
    /// quadratic tag, when present, shifts with it so closed-form
    /// references stay aligned.
    pub fn with_shifted_initial(&self, delta: &[f64]) -> Result<Problem> {
        if delta.len() != self.dim_state {
            return Err(CoreError::DimensionMismatch(format!(
                "shift of dim {} on state dim {}",
                delta.len(),
                self.dim_state
            )));
        }
        let mut out = self.clone();
        match &mut out.initial {
            InitialLaw::GaussianDiag { mean, .. } => {
                for (m, d) in mean.iter_mut().zip(delta) {
                    *m += d;
                }
            }
            InitialLaw::UniformBox { lo, hi } => {
                for i in 0..lo.len() {
                    lo[i] += delta[i];
                    hi[i] += delta[i];
                }
            }
        }
        if let Some(lq) = &mut out.lq {
            lq.initial_mean += delta[0];
        }
        Ok(out)
    }

    /// State box the control kernels partition: initial mean +- 6 spreads
    /// per axis, with a floor so nearly deterministic starts still get a
    /// usable box. Out-of-box states map to the nearest boundary cell.
    pub fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.initial.mean();
        let std = self.initial.std();
        let mut lo = Vec::with_capacity(mean.len());
        let mut hi = Vec::with_capacity(mean.len());
        for (&m, &s) in mean.iter().zip(&std) {
            let scale = s.max(0.05 * (1.0 + m.abs()));
            lo.push(m - 6.0 * scale);
            hi.push(m + 6.0 * scale);
        }
        (lo, hi)
    }
}

/// Parameters of the scalar linear-quadratic benchmarks:
/// drift `a x + g u`, constant volatility, multiplicative jumps `c x`, cost
/// `q (x - s mean)^2 + r u^2`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqParams {
    pub drift_a: f64,
    pub control_gain: f64,
    pub sigma: f64,
    pub jump_scale: f64,
    pub cost_q: f64,
    pub cost_r: f64,
    pub mean_coupling: f64,
    pub initial_mean: f64,
    pub initial_std: f64,
    pub horizon: f64,
    pub rate: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            drift_a: 0.5,
            control_gain: 1.0,
            sigma: 0.2,
            jump_scale: 0.1,
            cost_q: 1.0,
            cost_r: 1.0,
            mean_coupling: 0.0,
            initial_mean: 1.0,
            initial_std: 0.3,
            horizon: 1.0,
            rate: 1.0,
        }
    }
}

struct LqCoefficients {
    p: LqParams,
}

impl Coefficients for LqCoefficients {
    fn drift(&self, _t: f64, x: &[f64], _mu: &MeasureArg<'_>, u: &[f64], out: &mut [f64]) {
        out[0] = self.p.drift_a * x[0] + self.p.control_gain * u[0];
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &MeasureArg<'_>, _u: &[f64], out: &mut [f64]) {
        out[0] = self.p.sigma;
    }

    fn jump(&self, _t: f64, x: &[f64], _mu: &MeasureArg<'_>, _z: &[f64], out: &mut [f64]) {
        out[0] = self.p.jump_scale * x[0];
    }

    fn running_cost(&self, _t: f64, x: &[f64], mu: &MeasureArg<'_>, u: &[f64]) -> f64 {
        let target = self.p.mean_coupling * mu.mean[0];
        let dx = x[0] - target;
        self.p.cost_q * dx * dx + self.p.cost_r * u[0] * u[0]
    }
}

/// Build the scalar LQ benchmark. The control box is the generous
/// `[-10 (1 + |m0|), 10 (1 + |m0|)]`, wide enough that box constraints never
/// bind at the optimum.
pub fn make_lq_problem(params: LqParams) -> Result<Problem> {
    if !(params.cost_r > 0.0) || !(params.cost_q >= 0.0) {
        return Err(CoreError::InvalidProblem(
            "LQ benchmark needs r > 0 and q >= 0".into(),
        ));
    }
    let half = 10.0 * (1.0 + params.initial_mean.abs());
    let declared = params
        .drift_a
        .abs()
        .max(params.control_gain.abs())
        .max(params.jump_scale.abs());
    let problem = Problem {
        name: if params.mean_coupling == 0.0 { "lq1d".into() } else { "lq1d-meanfield".into() },
        dim_state: 1,
        dim_noise: 1,
        dim_control: 1,
        horizon: params.horizon,
        moment_order: 4.0,
        declared_lipschitz: declared,
        control_lo: vec![-half],
        control_hi: vec![half],
        intensity: IntensitySpec {
            rate: params.rate,
            mark: MarkDistribution::single(vec![0.0]),
        },
        initial: InitialLaw::GaussianDiag {
            mean: vec![params.initial_mean],
            std: vec![params.initial_std],
        },
        coeffs: Arc::new(LqCoefficients { p: params }),
        lq: Some(params),
    };
    problem.validate()?;
    Ok(problem)
}

/// Named benchmark registry used by the CLI and the verification suite.
pub fn make_benchmark(name: &str, mut params: LqParams) -> Result<Problem> {
    match name {
        "lq1d" => {
            params.mean_coupling = 0.0;
            make_lq_problem(params)
        }
        "lq1d-meanfield" => {
            if params.mean_coupling == 0.0 {
                params.mean_coupling = 0.3;
            }
            make_lq_problem(params)
        }
        other => Err(CoreError::InvalidConfig(format!(
            "unknown benchmark '{other}' (available: lq1d, lq1d-meanfield)"
        ))),
    }
}

/// Quadratic test function `phi(x) = x' A x + b' x + c`, with exact
/// derivatives for the generator.
#[derive(Clone, Debug)]
pub struct QuadraticTestFunction {
    pub dim: usize,
    /// row-major `dim x dim`
    pub quad: Vec<f64>,
    pub lin: Vec<f64>,
    pub constant: f64,
}

impl QuadraticTestFunction {
    /// `phi(x) = x_i`
    pub fn coordinate(dim: usize, i: usize) -> Self {
        let mut lin = vec![0.0; dim];
        lin[i] = 1.0;
        Self { dim, quad: vec![0.0; dim * dim], lin, constant: 0.0 }
    }

    /// `phi(x) = x_i^2`
    pub fn coordinate_squared(dim: usize, i: usize) -> Self {
        let mut quad = vec![0.0; dim * dim];
        quad[i * dim + i] = 1.0;
        Self { dim, quad, lin: vec![0.0; dim], constant: 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut v = self.constant;
        for i in 0..d {
            v += self.lin[i] * x[i];
            for j in 0..d {
                v += x[i] * self.quad[i * d + j] * x[j];
            }
        }
        v
    }

    /// `(A + A') x + b`
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut g = self.lin[i];
            for j in 0..d {
                g += (self.quad[i * d + j] + self.quad[j * d + i]) * x[j];
            }
            out[i] = g;
        }
    }

    /// Constant Hessian `A + A'`, row-major.
    pub fn hessian(&self) -> Vec<f64> {
        let d = self.dim;
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                h[i * d + j] = self.quad[i * d + j] + self.quad[j * d + i];
            }
        }
        h
    }
}

/// Generator of the continuous part on a quadratic test function:
/// `b . grad phi + 1/2 tr(sigma sigma' hess phi)`.
pub fn eval_generator(
    problem: &Problem,
    t: f64,
    x: &[f64],
    mu: &MeasureArg<'_>,
    u: &[f64],
    phi: &QuadraticTestFunction,
) -> Result<f64> {
    let (n, d) = (problem.dim_state, problem.dim_noise);
    if x.len() != n || phi.dim != n || u.len() != problem.dim_control {
        return Err(CoreError::DimensionMismatch("eval_generator arguments".into()));
    }
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n * d];
    problem.coeffs.drift(t, x, mu, u, &mut drift);
    problem.coeffs.diffusion(t, x, mu, u, &mut diff);
    let mut grad = vec![0.0; n];
    phi.gradient_into(x, &mut grad);
    let hess = phi.hessian();
    let mut val = 0.0;
    for i in 0..n {
        val += drift[i] * grad[i];
    }
    // 1/2 tr(sigma sigma' H) = 1/2 sum_{i,j,k} sigma_ik sigma_jk H_ij
    for i in 0..n {
        for j in 0..n {
            let h = hess[i * n + j];
            if h != 0.0 {
                let mut s = 0.0;
                for k in 0..d {
                    s += diff[i * d + k] * diff[j * d + k];
                }
                val += 0.5 * s * h;
            }
        }
    }
    if !val.is_finite() {
        return Err(CoreError::NonFinite {
            source_name: "generator".into(),
            detail: format!("t={t}, x={x:?}, u={u:?}"),
        });
    }
    Ok(val)
}

/// Observed ratios for one coefficient.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CoefficientRatios {
    /// `|f(x) - f(x')| / |x - x'|` with the law held fixed.
    pub lipschitz_x: f64,
    /// `|f(mu) - f(mu')| / W2(mu, mu')` with the state held fixed.
    pub lipschitz_mu: f64,
    /// `|f(u) - f(u')| / |u - u'|` (continuity scale in the control).
    pub lipschitz_u: f64,
}

/// Result of the sampling audit of the standing assumptions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probe_budget: usize,
    pub seed: u64,
    pub probe_halfwidth: f64,
    pub drift: CoefficientRatios,
    pub diffusion: CoefficientRatios,
    pub jump: CoefficientRatios,
    /// max over probes of `|gamma| / (1 + |x| + M2(mu))`.
    pub jump_growth: f64,
    pub declared: f64,
    /// Human-readable violations (empty iff `pass`).
    pub flags: Vec<String>,
    pub pass: bool,
}

pub struct ValidationConfig {
    pub probe_budget: usize,
    pub seed: u64,
    pub probe_halfwidth: f64,
    /// Particles per probe cloud.
    pub cloud_size: usize,
}

impl ValidationConfig {
    pub fn new(probe_budget: usize, seed: u64) -> Self {
        Self { probe_budget, seed, probe_halfwidth: 5.0, cloud_size: 16 }
    }
}

/// Probe the coefficients with random tuples and compare finite-difference
/// ratios against the declared constant. Exceeding it (beyond 1e-9 slack)
/// raises a flag; non-finite outputs are hard errors naming the coefficient
/// and the offending input.
pub fn validate_problem(problem: &Problem, probe_budget: usize, seed: u64) -> Result<ValidationReport> {
    validate_problem_with(problem, &ValidationConfig::new(probe_budget, seed))
}

pub fn validate_problem_with(problem: &Problem, cfg: &ValidationConfig) -> Result<ValidationReport> {
    problem.validate()?;
    let n = problem.dim_state;
    let hw = cfg.probe_halfwidth;
    let mut report = ValidationReport {
        probe_budget: cfg.probe_budget,
        seed: cfg.seed,
        probe_halfwidth: hw,
        drift: CoefficientRatios::default(),
        diffusion: CoefficientRatios::default(),
        jump: CoefficientRatios::default(),
        jump_growth: 0.0,
        declared: problem.declared_lipschitz,
        flags: Vec::new(),
        pass: true,
    };

    let mut buf_a = vec![0.0; n.max(problem.dim_state * problem.dim_noise)];
    let mut buf_b = vec![0.0; buf_a.len()];

    for k in 0..cfg.probe_budget {
        let mut rng = substream(cfg.seed, tag::PROBE, &[k as u64]);
        let t = rng.random::<f64>() * problem.horizon;
        let x = random_point(&mut rng, n, hw);
        let x2 = random_point(&mut rng, n, hw);
        let u = random_control(&mut rng, problem);
        let u2 = random_control(&mut rng, problem);
        let cloud_a = random_cloud(&mut rng, n, hw, cfg.cloud_size)?;
        let cloud_b = random_cloud(&mut rng, n, hw, cfg.cloud_size)?;
        let z = problem.intensity.mark.sample(&mut rng);
        let (sa, sb) = (NodeStats::of(cloud_a.view()), NodeStats::of(cloud_b.view()));
        let mu_a = MeasureArg { cloud: cloud_a.view(), mean: &sa.mean, second_moment: sa.second_moment };
        let mu_b = MeasureArg { cloud: cloud_b.view(), mean: &sb.mean, second_moment: sb.second_moment };
        let w2 = wasserstein2(cloud_a.view(), cloud_b.view())?;

        let dx = dist(&x, &x2);
        let du = dist(&u, &u2);
        let c = problem.coeffs.as_ref();

        {
        let mut probe = |name: &str,
                         ratios: &mut CoefficientRatios,
                         len: usize,
                         f: &dyn Fn(f64, &[f64], &MeasureArg<'_>, &[f64], &mut [f64])|
         -> Result<()> {
            f(t, &x, &mu_a, &u, &mut buf_a[..len]);
            check_finite(name, t, &x, &u, &buf_a[..len])?;
            if dx > 1e-12 {
                f(t, &x2, &mu_a, &u, &mut buf_b[..len]);
                check_finite(name, t, &x2, &u, &buf_b[..len])?;
                update_max(&mut ratios.lipschitz_x, dist(&buf_a[..len], &buf_b[..len]) / dx);
            }
            if w2 > 1e-12 {
                f(t, &x, &mu_b, &u, &mut buf_b[..len]);
                update_max(&mut ratios.lipschitz_mu, dist(&buf_a[..len], &buf_b[..len]) / w2);
            }
            if du > 1e-12 {
                f(t, &x, &mu_a, &u2, &mut buf_b[..len]);
                update_max(&mut ratios.lipschitz_u, dist(&buf_a[..len], &buf_b[..len]) / du);
            }
            Ok(())
        };
        probe("drift", &mut report.drift, n, &|t, x, mu, u, out| c.drift(t, x, mu, u, out))?;
        probe(
            "diffusion",
            &mut report.diffusion,
            problem.dim_state * problem.dim_noise,
            &|t, x, mu, u, out| c.diffusion(t, x, mu, u, out),
        )?;
        }

        // jump map: Lipschitz in (x, mu) plus the growth envelope
        c.jump(t, &x, &mu_a, &z, &mut buf_a[..n]);
        check_finite("jump", t, &x, &u, &buf_a[..n])?;
        let norm_x: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_gamma: f64 = buf_a[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        update_max(&mut report.jump_growth, norm_gamma / (1.0 + norm_x + mu_a.m2()));
        if dx > 1e-12 {
            c.jump(t, &x2, &mu_a, &z, &mut buf_b[..n]);
            check_finite("jump", t, &x2, &u, &buf_b[..n])?;
            update_max(&mut report.jump.lipschitz_x, dist(&buf_a[..n], &buf_b[..n]) / dx);
        }
        if w2 > 1e-12 {
            c.jump(t, &x, &mu_b, &z, &mut buf_b[..n]);
            update_max(&mut report.jump.lipschitz_mu, dist(&buf_a[..n], &buf_b[..n]) / w2);
        }

        let fval = c.running_cost(t, &x, &mu_a, &u);
        if !fval.is_finite() {
            return Err(CoreError::NonFinite {
                source_name: "running_cost".into(),
                detail: format!("probe {k}: t={t}, x={x:?}, u={u:?}"),
            });
        }
    }

    let slack = problem.declared_lipschitz * (1.0 + 1e-9);
    let flag = |name: &str, value: f64, flags: &mut Vec<String>| {
        if value > slack {
            flags.push(format!(
                "{name} ratio {value:.6} exceeds declared constant {}",
                problem.declared_lipschitz
            ));
        }
    };
    let mut flags = Vec::new();
    flag("drift x", report.drift.lipschitz_x, &mut flags);
    flag("drift mu", report.drift.lipschitz_mu, &mut flags);
    flag("diffusion x", report.diffusion.lipschitz_x, &mut flags);
    flag("diffusion mu", report.diffusion.lipschitz_mu, &mut flags);
    flag("jump x", report.jump.lipschitz_x, &mut flags);
    flag("jump mu", report.jump.lipschitz_mu, &mut flags);
    flag("jump growth", report.jump_growth, &mut flags);
    report.pass = flags.is_empty();
    report.flags = flags;
    Ok(report)
}

fn update_max(slot: &mut f64, v: f64) {
    if v > *slot {
        *slot = v;
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_finite(name: &str, t: f64, x: &[f64], u: &[f64], out: &[f64]) -> Result<()> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite {
            source_name: name.to_string(),
            detail: format!("t={t}, x={x:?}, u={u:?}"),
        });
    }
    Ok(())
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, hw: f64) -> Vec<f64> {
    (0..dim).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * hw).collect()
}

fn random_control(rng: &mut ChaCha8Rng, p: &Problem) -> Vec<f64> {
    p.control_lo
        .iter()
        .zip(&p.control_hi)
        .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
        .collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, dim: usize, hw: f64, size: usize) -> Result<ParticleCloud> {
    let points: Vec<f64> = (0..size * dim)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * hw)
        .collect();
    ParticleCloud::uniform(dim, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probe_measure(points: &[f64]) -> (ParticleCloud, NodeStats) {
        let c = ParticleCloud::from_scalars(points).unwrap();
        let s = NodeStats::of(c.view());
        (c, s)
    }

    #[test]
    fn lq_generator_on_square_test_function() {
        // b grad phi + 1/2 sigma^2 phi'' at x=1, u=0: 2a + sigma^2 = 1.04
        let p = make_lq_problem(LqParams::default()).unwrap();
        let (c, s) = probe_measure(&[0.0, 1.0]);
        let mu = MeasureArg { cloud: c.view(), mean: &s.mean, second_moment: s.second_moment };
        let phi = QuadraticTestFunction::coordinate_squared(1, 0);
        let v = eval_generator(&p, 0.0, &[1.0], &mu, &[0.0], &phi).unwrap();
        assert_relative_eq!(v, 1.04, max_relative = 1e-14);
        // linear test function drops the diffusion term entirely
        let lin = QuadraticTestFunction::coordinate(1, 0);
        let v = eval_generator(&p, 0.0, &[1.0], &mu, &[2.0], &lin).unwrap();
        assert_relative_eq!(v, 0.5 + 2.0, max_relative = 1e-14);
    }

    #[test]
    fn lq_probe_ratios_match_analytic_constants() {
        let p = make_lq_problem(LqParams::default()).unwrap();
        let report = validate_problem(&p, 500, 11).unwrap();
        assert!(report.pass, "{:?}", report.flags);
        // linear drift: exact ratio a in x, gain in u, independent of mu
        assert_relative_eq!(report.drift.lipschitz_x, 0.5, max_relative = 1e-9);
        assert_relative_eq!(report.drift.lipschitz_u, 1.0, max_relative = 1e-9);
        assert_eq!(report.drift.lipschitz_mu, 0.0);
        assert_eq!(report.diffusion.lipschitz_x, 0.0);
        assert_relative_eq!(report.jump.lipschitz_x, 0.1, max_relative = 1e-9);
        assert!(report.jump_growth <= 0.1 + 1e-12);
    }

    #[test]
    fn validation_is_deterministic_in_seed() {
        let p = make_lq_problem(LqParams::default()).unwrap();
        let a = validate_problem(&p, 200, 5).unwrap();
        let b = validate_problem(&p, 200, 5).unwrap();
        assert_eq!(a.drift.lipschitz_x.to_bits(), b.drift.lipschitz_x.to_bits());
        assert_eq!(a.jump_growth.to_bits(), b.jump_growth.to_bits());
    }

    /// A jump map that is quadratic in the state, violating any global
    /// Lipschitz declaration on a wide enough probe box.
    struct QuadraticJump;
    impl Coefficients for QuadraticJump {
        fn drift(&self, _: f64, _: &[f64], _: &MeasureArg<'_>, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion(&self, _: f64, _: &[f64], _: &MeasureArg<'_>, _: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
        }
        fn jump(&self, _: f64, x: &[f64], _: &MeasureArg<'_>, _: &[f64], out: &mut [f64]) {
            out[0] = x[0] * x[0];
        }
        fn running_cost(&self, _: f64, x: &[f64], _: &MeasureArg<'_>, u: &[f64]) -> f64 {
            x[0] * x[0] + u[0] * u[0]
        }
    }

    #[test]
    fn quadratic_jump_map_is_flagged() {
        let mut p = make_lq_problem(LqParams::default()).unwrap();
        p.coeffs = Arc::new(QuadraticJump);
        p.declared_lipschitz = 1.0;
        let cfg = ValidationConfig { probe_budget: 400, seed: 3, probe_halfwidth: 2.0, cloud_size: 16 };
        let report = validate_problem_with(&p, &cfg).unwrap();
        // |x^2 - y^2| / |x - y| = |x + y| reaches ~4 on [-2, 2]
        assert!(!report.pass);
        assert!(report.jump.lipschitz_x > 1.01);
        assert!(report.flags.iter().any(|f| f.contains("jump x")));
    }

    #[test]
    fn benchmark_registry_rejects_unknown_names() {
        assert!(make_benchmark("lq1d", LqParams::default()).is_ok());
        let mf = make_benchmark("lq1d-meanfield", LqParams::default()).unwrap();
        assert!(mf.lq.unwrap().mean_coupling > 0.0);
        assert!(make_benchmark("nope", LqParams::default()).is_err());
    }
}
