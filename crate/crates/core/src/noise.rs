//! Common noise: finite-intensity point paths.
//!
//! The common noise is a Poisson random measure with finite total intensity,
//! so a realization over `[0, T]` is just a finite list of (time, mark)
//! events. Freezing one such path is what turns the conditional dynamics
//! into a deterministic-jump problem that can be solved piece by piece.
//!
//! Sampling uses the conditional-uniform construction: draw the event count
//! from Poisson(rate * T), then event times as sorted uniforms on (0, T)
//! (re-drawn in the zero-probability event of a tie), then i.i.d. marks.

use crate::error::{CoreError, Result};
use crate::fmt::g17;
use crate::rng::{substream, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Distribution of jump marks, normalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum MarkDistribution {
    /// Finitely many marks with given probabilities.
    Finite { marks: Vec<Vec<f64>>, probs: Vec<f64> },
    /// Uniform product density on an axis-aligned box.
    BoxUniform { lo: Vec<f64>, hi: Vec<f64> },
}

impl MarkDistribution {
    /// A single deterministic mark (the degenerate case used by benchmarks
    /// whose jump map ignores the mark value).
    pub fn single(mark: Vec<f64>) -> Self {
        Self::Finite { marks: vec![mark], probs: vec![1.0] }
    }

    pub fn mark_dim(&self) -> usize {
        match self {
            Self::Finite { marks, .. } => marks.first().map_or(0, Vec::len),
            Self::BoxUniform { lo, .. } => lo.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Finite { marks, probs } => {
                if marks.is_empty() || marks.len() != probs.len() {
                    return Err(CoreError::InvalidConfig(
                        "finite mark distribution needs matching, nonempty marks and probs".into(),
                    ));
                }
                let d = marks[0].len();
                if marks.iter().any(|m| m.len() != d) {
                    return Err(CoreError::DimensionMismatch("ragged mark list".into()));
                }
                let mut sum = 0.0;
                for &p in probs {
                    if !(p >= 0.0) {
                        return Err(CoreError::BadWeights(p));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > crate::measures::WEIGHT_TOL {
                    return Err(CoreError::BadWeights(sum));
                }
            }
            Self::BoxUniform { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(CoreError::DimensionMismatch("mark box bounds".into()));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(CoreError::InvalidConfig("mark box must have lo < hi".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Self::Finite { marks, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (m, &p) in marks.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return m.clone();
                    }
                }
                marks.last().unwrap().clone()
            }
            Self::BoxUniform { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| l + (h - l) * rng.random::<f64>())
                .collect(),
        }
    }
}

/// Intensity of the common-noise measure: arrival rate plus mark law.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensitySpec {
    pub rate: f64,
    pub mark: MarkDistribution,
}

impl IntensitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate >= 0.0) || !self.rate.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "intensity rate must be finite and >= 0, got {}",
                self.rate
            )));
        }
        self.mark.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointEvent {
    pub time: f64,
    pub mark: Vec<f64>,
}

/// One frozen realization of the common noise on `[0, horizon]`: finitely
/// many events with strictly increasing times in `(0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPath {
    pub horizon: f64,
    pub events: Vec<PointEvent>,
}

impl PointPath {
    pub fn new(horizon: f64, events: Vec<PointEvent>) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(CoreError::InvalidPointPath(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        let mut prev = 0.0;
        for e in &events {
            if !(e.time > prev) || e.time > horizon {
                return Err(CoreError::InvalidPointPath(format!(
                    "event times must be strictly increasing in (0, {horizon}], got {} after {prev}",
                    e.time
                )));
            }
            if !e.time.is_finite() || e.mark.iter().any(|m| !m.is_finite()) {
                return Err(CoreError::InvalidPointPath("non-finite event".into()));
            }
            prev = e.time;
        }
        Ok(Self { horizon, events })
    }

    pub fn empty(horizon: f64) -> Self {
        Self { horizon, events: Vec::new() }
    }

    pub fn jump_count(&self) -> usize {
        self.events.len()
    }

    pub fn jump_times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    /// `N([0, t])`: number of events up to and including `t`.
    pub fn counting_measure(&self, t: f64) -> usize {
        self.events.iter().take_while(|e| e.time <= t).count()
    }

    /// Text form: first line the horizon, then one `time,mark...` line per
    /// event, all floats at 17 significant digits (exact round-trip).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&g17(self.horizon));
        s.push('\n');
        for e in &self.events {
            s.push_str(&g17(e.time));
            for m in &e.mark {
                s.push(',');
                s.push_str(&g17(*m));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| CoreError::Parse("empty point-path text".into()))?;
        let horizon: f64 = first
            .trim()
            .parse()
            .map_err(|e| CoreError::Parse(format!("line 1: bad horizon: {e}")))?;
        let mut events = Vec::new();
        for (idx, line) in lines {
            let mut parts = line.trim().split(',');
            let t: f64 = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|e| CoreError::Parse(format!("line {}: bad time: {e}", idx + 1)))?;
            let mark = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| CoreError::Parse(format!("line {}: bad mark: {e}", idx + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            events.push(PointEvent { time: t, mark });
        }
        Self::new(horizon, events)
    }
}

/// Sample one path. Deterministic in `(seed, index)`; distinct indices give
/// independent paths, which is how verification checks freeze a batch.
pub fn sample_point_path(
    intensity: &IntensitySpec,
    horizon: f64,
    seed: u64,
    index: u64,
) -> Result<PointPath> {
    intensity.validate()?;
    if !(horizon > 0.0) {
        return Err(CoreError::InvalidPointPath(format!("horizon {horizon}")));
    }
    let mut rng = substream(seed, tag::POINT_PATH, &[index]);
    let total = intensity.rate * horizon;
    let count = if total > 0.0 {
        Poisson::new(total)
            .map_err(|e| CoreError::InvalidConfig(format!("Poisson({total}): {e}")))?
            .sample(&mut rng) as usize
    } else {
        0
    };
    let mut times = vec![0.0; count];
    loop {
        for t in times.iter_mut() {
            *t = rng.random::<f64>() * horizon;
        }
        times.sort_unstable_by(f64::total_cmp);
        let ok = times.iter().all(|&t| t > 0.0)
            && times.windows(2).all(|w| w[0] < w[1]);
        if ok {
            break;
        }
        // ties have probability zero but would break the strict ordering
        // invariant; re-draw the whole vector to stay unbiased
    }
    let events = times
        .into_iter()
        .map(|time| PointEvent { time, mark: intensity.mark.sample(&mut rng) })
        .collect();
    PointPath::new(horizon, events)
}

/// A batch of independent paths from consecutive indices.
pub fn sample_point_paths(
    intensity: &IntensitySpec,
    horizon: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<PointPath>> {
    (0..count)
        .map(|k| sample_point_path(intensity, horizon, seed, k as u64))
        .collect()
}
