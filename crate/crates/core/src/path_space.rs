//! Discretized continuous paths, crossing-time partitions, the pathwise
//! quadratic variation, the second-order process `‖S‖² − ⟨S⟩` and
//! diagnostics for the prediction set of paths with bounded QV slope.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::{dist, norm, norm_sq};

/// Shared time grid. Paths in an ensemble point at the same allocation.
pub type Grid = Arc<[f64]>;

/// Uniform grid `t_i = i·T/steps`, with the last point exactly `T`.
pub fn uniform_grid(steps: usize, horizon: f64) -> Result<Grid> {
    if steps == 0 {
        return Err(invalid("grid needs at least one step"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    let mut times: Vec<f64> = (0..=steps)
        .map(|i| horizon * i as f64 / steps as f64)
        .collect();
    times[steps] = horizon;
    Ok(times.into())
}

pub(crate) fn validate_grid(times: &[f64]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::InvalidPath("grid needs at least two points".into()));
    }
    if times[0] != 0.0 {
        return Err(Error::InvalidPath(format!(
            "grid must start at 0, starts at {}",
            times[0]
        )));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) || !w[1].is_finite() {
            return Err(Error::InvalidPath(format!(
                "grid not strictly increasing near {}",
                w[0]
            )));
        }
    }
    Ok(())
}

/// A continuous path sampled on a grid, valued in `ℝ^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    times: Grid,
    values: Vec<f64>,
    dim: usize,
}

impl SamplePath {
    /// `values` is row-major: grid point `i` occupies `values[i*dim..(i+1)*dim]`.
    pub fn new(times: impl Into<Grid>, values: Vec<f64>, dim: usize) -> Result<Self> {
        let times = times.into();
        validate_grid(&times)?;
        Self::on_grid(times, values, dim)
    }

    /// Like [`SamplePath::new`] but trusts that `times` is a valid grid.
    pub(crate) fn on_grid(times: Grid, values: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidPath("dimension must be positive".into()));
        }
        if values.len() != times.len() * dim {
            return Err(Error::InvalidPath(format!(
                "expected {} values for {} grid points of dimension {dim}, got {}",
                times.len() * dim,
                times.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPath(format!(
                "non-finite value at grid index {}",
                pos / dim
            )));
        }
        Ok(Self { times, values, dim })
    }

    pub fn scalar(times: impl Into<Grid>, values: Vec<f64>) -> Result<Self> {
        Self::new(times, values, 1)
    }

    pub fn constant(times: impl Into<Grid>, value: &[f64]) -> Result<Self> {
        let times = times.into();
        let values = value
            .iter()
            .copied()
            .cycle()
            .take(value.len() * times.len())
            .collect();
        Self::new(times, values, value.len())
    }

    pub fn from_fn(times: impl Into<Grid>, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let times = times.into();
        let mut values = Vec::with_capacity(times.len() * dim);
        for &t in times.iter() {
            let v = f(t);
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
            }
            values.extend(v);
        }
        Self::new(times, values, dim)
    }

    pub fn times(&self) -> &Grid {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last_index(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Scalar paths only: the value at grid index `i`.
    pub fn scalar_at(&self, i: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.values[i]
    }

    pub fn same_grid(&self, other: &SamplePath) -> bool {
        Arc::ptr_eq(&self.times, &other.times) || self.times == other.times
    }

    pub(crate) fn check_grid(&self, other_times: &Grid, what: &str) -> Result<()> {
        if Arc::ptr_eq(&self.times, other_times) || self.times == *other_times {
            Ok(())
        } else {
            Err(Error::GridMismatch(what.to_string()))
        }
    }

    /// Largest norm of a single grid step.
    pub fn max_increment(&self) -> f64 {
        (1..self.len())
            .map(|i| dist(self.value(i), self.value(i - 1)))
            .fold(0.0, f64::max)
    }

    /// `max_i ‖ω(t_i) − ω(0)‖`.
    pub fn oscillation(&self) -> f64 {
        let start = self.value(0);
        (1..self.len())
            .map(|i| dist(self.value(i), start))
            .fold(0.0, f64::max)
    }

    pub fn min_step(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn norms_sq(&self) -> Vec<f64> {
        (0..self.len()).map(|i| norm_sq(self.value(i))).collect()
    }

    /// The path seen by a nonanticipating functional at grid index `i`.
    pub fn view(&self, i: usize) -> PathView<'_> {
        assert!(i < self.len(), "view index {i} out of range");
        PathView { path: self, upto: i }
    }

    /// The path frozen after grid index `i`.
    pub fn stopped_at(&self, i: usize) -> SamplePath {
        let mut values = self.values.clone();
        let frozen = self.value(i).to_vec();
        for j in i + 1..self.len() {
            values[j * self.dim..(j + 1) * self.dim].copy_from_slice(&frozen);
        }
        SamplePath { times: self.times.clone(), values, dim: self.dim }
    }

    /// Replace values, keeping the grid.
    pub fn with_values(&self, values: Vec<f64>, dim: usize) -> Result<SamplePath> {
        SamplePath::on_grid(self.times.clone(), values, dim)
    }

    /// Every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize, grid: &Grid) -> Result<SamplePath> {
        if factor == 0 || !self.last_index().is_multiple_of(factor) {
            return Err(invalid(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.last_index()
            )));
        }
        let values = (0..grid.len())
            .flat_map(|i| self.value(i * factor).to_vec())
            .collect();
        SamplePath::on_grid(grid.clone(), values, self.dim)
    }
}

/// Read access to a path restricted to grid indices `0..=upto`.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    path: &'a SamplePath,
    upto: usize,
}

impl<'a> PathView<'a> {
    pub fn index(&self) -> usize {
        self.upto
    }

    pub fn time(&self) -> f64 {
        self.path.time(self.upto)
    }

    pub fn horizon(&self) -> f64 {
        self.path.horizon()
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    pub fn current(&self) -> &'a [f64] {
        self.path.value(self.upto)
    }

    /// `None` for indices after the current one.
    pub fn value(&self, j: usize) -> Option<&'a [f64]> {
        (j <= self.upto).then(|| self.path.value(j))
    }

    pub fn time_at(&self, j: usize) -> Option<f64> {
        (j <= self.upto).then(|| self.path.time(j))
    }
}

/// Stop indices of the crossing-time partition at threshold `2^{-level}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingPartition {
    pub level: u32,
    pub stop_indices: Vec<usize>,
    /// Number of stops at which the threshold was actually reached (the
    /// appended terminal index is not counted unless it is a crossing).
    pub crossings: usize,
}

pub fn level_threshold(level: u32) -> f64 {
    2f64.powi(-(level as i32))
}

/// First grid index after each stop at which the path has moved at least
/// `2^{-m}` in norm from that stop; the last grid index is always appended.
pub fn crossing_partition(path: &SamplePath, m: u32) -> CrossingPartition {
    let eps = level_threshold(m);
    let mut stops = vec![0usize];
    let mut anchor = 0usize;
    let mut crossings = 0;
    for i in 1..path.len() {
        if dist(path.value(i), path.value(anchor)) >= eps {
            stops.push(i);
            anchor = i;
            crossings += 1;
        }
    }
    let last = path.last_index();
    if *stops.last().unwrap() != last {
        stops.push(last);
    }
    CrossingPartition { level: m, stop_indices: stops, crossings }
}

/// How squared increments between stops are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QvMode {
    /// `(‖ω(σ_k)‖ − ‖ω(σ_{k-1})‖)²`.
    #[default]
    NormDifference,
    /// `‖ω(σ_k) − ω(σ_{k-1})‖²`, the trace of the tensor bracket.
    IncrementNorm,
}

/// Nondecreasing quadratic-variation path on a grid, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QvPath {
    times: Grid,
    qv: Vec<f64>,
    level: u32,
}

impl QvPath {
    pub fn new(times: impl Into<Grid>, qv: Vec<f64>, level: u32) -> Result<Self> {
        let times = times.into();
        validate_grid(&times)?;
        if qv.len() != times.len() {
            return Err(Error::InvalidPath(format!(
                "qv has {} values for {} grid points",
                qv.len(),
                times.len()
            )));
        }
        if qv[0] != 0.0 {
            return Err(Error::InvalidPath("qv must start at 0".into()));
        }
        for w in qv.windows(2) {
            if !w[1].is_finite() || w[1] < w[0] {
                return Err(Error::InvalidPath("qv must be finite and nondecreasing".into()));
            }
        }
        Ok(Self { times, qv, level })
    }

    /// Zero quadratic variation on the grid of `path`.
    pub fn zero(path: &SamplePath) -> Self {
        Self { times: path.times().clone(), qv: vec![0.0; path.len()], level: 0 }
    }

    pub fn times(&self) -> &Grid {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.qv
    }

    pub fn at(&self, i: usize) -> f64 {
        self.qv[i]
    }

    pub fn terminal(&self) -> f64 {
        self.qv[self.qv.len() - 1]
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.qv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qv.is_empty()
    }

    /// The QV as a scalar path (an integrator in its own right).
    pub fn as_path(&self) -> SamplePath {
        SamplePath { times: self.times.clone(), values: self.qv.clone(), dim: 1 }
    }

    fn sup_distance(&self, other: &QvPath) -> f64 {
        self.qv
            .iter()
            .zip(&other.qv)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Level-`m` quadratic variation: at grid time `t`, the sum of squared
/// (norm-)differences over the crossing stops `σ_k ≤ t`. The terminal grid
/// index is a stop, so the terminal value is the full crossing sum.
pub fn qv_at_level(path: &SamplePath, m: u32, mode: QvMode) -> (QvPath, CrossingPartition) {
    let partition = crossing_partition(path, m);
    let mut qv = vec![0.0; path.len()];
    let mut total = 0.0;
    let stops = &partition.stop_indices;
    for pair in stops.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        for q in &mut qv[a..b] {
            *q = total;
        }
        total += match mode {
            QvMode::NormDifference => {
                let d = norm(path.value(b)) - norm(path.value(a));
                d * d
            }
            QvMode::IncrementNorm => {
                let d = dist(path.value(b), path.value(a));
                d * d
            }
        };
    }
    qv[path.last_index()] = total;
    (
        QvPath { times: path.times().clone(), qv, level: m },
        partition,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QvOptions {
    pub m_max: u32,
    /// Sup-norm tolerance between successive levels (state units²).
    pub tol: f64,
    /// Successive levels are only compared once the coarser one has at least
    /// this many crossings.
    pub min_crossings: usize,
    pub mode: QvMode,
}

impl Default for QvOptions {
    fn default() -> Self {
        Self { m_max: 30, tol: 0.05, min_crossings: 8, mode: QvMode::NormDifference }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QvEstimate {
    pub qv: QvPath,
    pub level: u32,
    pub converged: bool,
    /// The level search stopped because `2^{-m}` fell below twice the
    /// largest grid increment.
    pub exhausted: bool,
}

/// Refine the crossing level until successive QV paths agree to `tol` in
/// sup norm, or the grid can no longer resolve the threshold.
pub fn quadratic_variation(path: &SamplePath, opts: &QvOptions) -> Result<QvEstimate> {
    if opts.m_max < 1 {
        return Err(invalid("m_max must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let (mut prev, mut prev_part) = qv_at_level(path, 0, opts.mode);
    if path.oscillation() == 0.0 {
        return Ok(QvEstimate { qv: prev, level: 0, converged: true, exhausted: false });
    }
    let resolution = 2.0 * path.max_increment();
    for m in 1..=opts.m_max {
        if level_threshold(m) < resolution {
            return Ok(QvEstimate { level: m - 1, qv: prev, converged: false, exhausted: true });
        }
        let (cur, part) = qv_at_level(path, m, opts.mode);
        if prev_part.crossings >= opts.min_crossings && cur.sup_distance(&prev) < opts.tol {
            return Ok(QvEstimate { qv: cur, level: m, converged: true, exhausted: false });
        }
        prev = cur;
        prev_part = part;
    }
    Ok(QvEstimate { qv: prev, level: opts.m_max, converged: false, exhausted: false })
}

/// `𝕊_t = ‖ω(t)‖² − ⟨ω⟩_t`.
pub fn ss_process(path: &SamplePath, qv: &QvPath) -> Result<SamplePath> {
    path.check_grid(qv.times(), "path and qv grids differ")?;
    let values = (0..path.len())
        .map(|i| norm_sq(path.value(i)) - qv.at(i))
        .collect();
    SamplePath::on_grid(path.times().clone(), values, 1)
}

/// The prediction set of Hölder paths whose QV has slope at most `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionSetSpec {
    pub c: f64,
    pub horizon: f64,
    pub dim: usize,
}

impl PredictionSetSpec {
    pub fn new(c: f64, horizon: f64, dim: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("c must be positive, got {c}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        Ok(Self { c, horizon, dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiCheckOptions {
    /// Hölder exponent used by the scale diagnostic.
    pub alpha: f64,
    /// Relative slack on the slope bound `c`.
    pub slack: f64,
    /// Width, in standard deviations, of the crossing-count noise band.
    pub noise_z: f64,
    /// Largest tolerated ratio between the finest-scale and coarse-scale
    /// Hölder quotients.
    pub holder_growth_limit: f64,
}

impl Default for XiCheckOptions {
    fn default() -> Self {
        Self { alpha: 0.4, slack: 0.05, noise_z: 4.0, holder_growth_limit: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    #[serde(rename = "true")]
    Member,
    #[serde(rename = "false")]
    NotMember,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderScale {
    pub scale: f64,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiReport {
    /// Largest forward difference quotient of the QV between adjacent grid points.
    pub qv_slope_grid: f64,
    /// Largest windowed QV slope over all dyadic window scales.
    pub qv_slope_max: f64,
    pub slope_limit: f64,
    /// Largest amount by which a window slope exceeds the limit plus the
    /// resolution/noise allowance at its scale (≤ 0 means no violation).
    pub worst_slope_excess: f64,
    pub holder: Vec<HolderScale>,
    pub holder_growth: f64,
    /// The QV level is too coarse to test the slope bound even over `[0, T]`.
    pub resolution_limited: bool,
    pub verdict: Verdict,
}

fn next_index_at_least(times: &[f64], from: usize, target: f64) -> Option<usize> {
    let j = from + 1 + times[from + 1..].partition_point(|&t| t < target);
    (j < times.len()).then_some(j)
}

/// Advisory membership diagnostic for `Ξ_c`. Hölder continuity of a sampled
/// path is not decidable, so the verdict is one of true/false/indeterminate.
pub fn check_xi_c(
    path: &SamplePath,
    qv: &QvPath,
    spec: &PredictionSetSpec,
    opts: &XiCheckOptions,
) -> Result<XiReport> {
    path.check_grid(qv.times(), "path and qv grids differ")?;
    let times = path.times();
    let horizon = path.horizon();
    let last = path.last_index();
    let c = spec.c;
    let limit = c * (1.0 + opts.slack);
    let eps = level_threshold(qv.level());
    let allowance = |h: f64| {
        (2.0 * eps * eps + opts.noise_z * (2.0f64 / 3.0).sqrt() * eps * (c * h).sqrt()) / h
    };

    let qv_slope_grid = (0..last)
        .map(|i| (qv.at(i + 1) - qv.at(i)) / (times[i + 1] - times[i]))
        .fold(0.0, f64::max);

    let min_step = path.min_step();
    let mut scales = Vec::new();
    let mut h = horizon;
    while h >= min_step {
        scales.push(h);
        h *= 0.5;
    }

    let mut qv_slope_max = 0.0f64;
    let mut worst_slope_excess = f64::NEG_INFINITY;
    for &h in &scales {
        let mut i = 0;
        while i < last {
            let j = next_index_at_least(times, i, times[i] + h * (1.0 - 1e-12)).unwrap_or(last);
            let width = times[j] - times[i];
            let slope = (qv.at(j) - qv.at(i)) / width;
            qv_slope_max = qv_slope_max.max(slope);
            worst_slope_excess = worst_slope_excess.max(slope - allowance(width) - limit);
            i = j;
        }
    }

    let holder_at = |h: Option<f64>| -> f64 {
        let mut best = 0.0f64;
        for i in 0..last {
            let j = match h {
                None => i + 1,
                Some(h) => match next_index_at_least(times, i, times[i] + h * (1.0 - 1e-12)) {
                    Some(j) => j,
                    None => break,
                },
            };
            let q = dist(path.value(j), path.value(i)) / (times[j] - times[i]).powf(opts.alpha);
            best = best.max(q);
        }
        best
    };
    let mut holder: Vec<HolderScale> = scales
        .iter()
        .map(|&h| HolderScale { scale: h, quotient: holder_at(Some(h)) })
        .collect();
    holder.push(HolderScale { scale: min_step, quotient: holder_at(None) });

    let reference = holder
        .iter()
        .filter(|s| s.scale >= horizon / 8.0 * (1.0 - 1e-12))
        .map(|s| s.quotient)
        .fold(0.0, f64::max);
    let peak = holder.iter().map(|s| s.quotient).fold(0.0, f64::max);
    let holder_growth = if peak == 0.0 {
        0.0
    } else if reference == 0.0 {
        f64::INFINITY
    } else {
        peak / reference
    };

    let resolution_limited = allowance(horizon) > limit && path.oscillation() > 0.0;
    let verdict = if holder_growth > opts.holder_growth_limit || worst_slope_excess > 0.0 {
        Verdict::NotMember
    } else if resolution_limited {
        Verdict::Indeterminate
    } else {
        Verdict::Member
    };

    Ok(XiReport {
        qv_slope_grid,
        qv_slope_max,
        slope_limit: limit,
        worst_slope_excess,
        holder,
        holder_growth,
        resolution_limited,
        verdict,
    })
}

/// Deterministic variance-rate profile for time-changed Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum RateProfile {
    Constant { rate: f64 },
    /// `mean + amplitude·sin(2πt/period)`.
    Sinusoid { mean: f64, amplitude: f64, period: f64 },
}

impl RateProfile {
    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            RateProfile::Constant { rate } => rate,
            RateProfile::Sinusoid { mean, amplitude, period } => {
                mean + amplitude * (std::f64::consts::TAU * t / period).sin()
            }
        }
    }

    /// `∫_a^b rate(s) ds`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match *self {
            RateProfile::Constant { rate } => rate * (b - a),
            RateProfile::Sinusoid { mean, amplitude, period } => {
                let w = std::f64::consts::TAU / period;
                mean * (b - a) + amplitude * ((w * a).cos() - (w * b).cos()) / w
            }
        }
    }

    pub fn max_rate(&self) -> f64 {
        match *self {
            RateProfile::Constant { rate } => rate,
            RateProfile::Sinusoid { mean, amplitude, .. } => mean + amplitude.abs(),
        }
    }

    pub fn min_rate(&self) -> f64 {
        match *self {
            RateProfile::Constant { rate } => rate,
            RateProfile::Sinusoid { mean, amplitude, .. } => mean - amplitude.abs(),
        }
    }
}

/// The law an ensemble was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MeasureTag {
    /// Independent coordinates, each a Brownian motion with variance rate `vol²`.
    Brownian {
        vol: f64,
        #[serde(default)]
        offset: f64,
    },
    TimeChangedBrownian {
        rate: RateProfile,
        #[serde(default)]
        offset: f64,
    },
    Deterministic { label: String },
}

impl MeasureTag {
    pub fn bm(vol: f64) -> Self {
        MeasureTag::Brownian { vol, offset: 0.0 }
    }

    /// Largest QV slope the law produces (per coordinate).
    pub fn max_rate(&self) -> Option<f64> {
        match self {
            MeasureTag::Brownian { vol, .. } => Some(vol * vol),
            MeasureTag::TimeChangedBrownian { rate, .. } => Some(rate.max_rate()),
            MeasureTag::Deterministic { .. } => None,
        }
    }
}

impl fmt::Display for MeasureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let offset_suffix = |o: f64| if o == 0.0 { String::new() } else { format!(";offset={o}") };
        match self {
            MeasureTag::Brownian { vol, offset } => write!(f, "bm({vol}{})", offset_suffix(*offset)),
            MeasureTag::TimeChangedBrownian { rate, offset } => match rate {
                RateProfile::Constant { rate } => {
                    write!(f, "tcbm(const:{rate}{})", offset_suffix(*offset))
                }
                RateProfile::Sinusoid { mean, amplitude, period } => write!(
                    f,
                    "tcbm(sin:{mean},{amplitude},{period}{})",
                    offset_suffix(*offset)
                ),
            },
            MeasureTag::Deterministic { label } => write!(f, "deterministic({label})"),
        }
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

impl FromStr for MeasureTag {
    type Err = Error;

    /// Accepts `bm:VOL`, `bm(VOL)`, `tcbm:const:R`, `tcbm:sin:MEAN,AMP,PERIOD`,
    /// `deterministic(LABEL)`; an offset is given as `@X` or `;offset=X`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, body) = if let Some(open) = s.find('(') {
            let body = s[open + 1..]
                .strip_suffix(')')
                .ok_or_else(|| Error::Parse(format!("unbalanced parentheses in {s:?}")))?;
            (&s[..open], body)
        } else if let Some(colon) = s.find(':') {
            (&s[..colon], &s[colon + 1..])
        } else {
            return Err(Error::Parse(format!("unrecognised measure {s:?}")));
        };
        let (body, offset) = if let Some((b, o)) = body.split_once(";offset=") {
            (b, parse_f64(o)?)
        } else if let Some((b, o)) = body.split_once('@') {
            (b, parse_f64(o)?)
        } else {
            (body, 0.0)
        };
        match head {
            "bm" => Ok(MeasureTag::Brownian { vol: parse_f64(body)?, offset }),
            "tcbm" => {
                let (kind, args) = body
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("tcbm needs a profile: {s:?}")))?;
                let nums: Vec<f64> = args.split(',').map(parse_f64).collect::<Result<_>>()?;
                let rate = match (kind, nums.as_slice()) {
                    ("const", [r]) => RateProfile::Constant { rate: *r },
                    ("sin", [m, a, p]) => RateProfile::Sinusoid { mean: *m, amplitude: *a, period: *p },
                    _ => return Err(Error::Parse(format!("bad tcbm profile in {s:?}"))),
                };
                Ok(MeasureTag::TimeChangedBrownian { rate, offset })
            }
            "deterministic" => Ok(MeasureTag::Deterministic { label: body.to_string() }),
            _ => Err(Error::Parse(format!("unrecognised measure {s:?}"))),
        }
    }
}

/// Paths on one shared grid together with the recipe that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    paths: Vec<SamplePath>,
    seed: u64,
    measure: MeasureTag,
}

impl PathEnsemble {
    pub fn deterministic(paths: Vec<SamplePath>, label: &str) -> Result<Self> {
        let first = paths
            .first()
            .ok_or_else(|| invalid("ensemble needs at least one path"))?;
        for p in &paths[1..] {
            if !p.same_grid(first) {
                return Err(Error::GridMismatch("ensemble paths must share a grid".into()));
            }
            if p.dim() != first.dim() {
                return Err(Error::DimensionMismatch { expected: first.dim(), got: p.dim() });
            }
        }
        Ok(Self {
            paths,
            seed: 0,
            measure: MeasureTag::Deterministic { label: label.to_string() },
        })
    }

    pub fn paths(&self) -> &[SamplePath] {
        &self.paths
    }

    pub fn path(&self, i: usize) -> &SamplePath {
        &self.paths[i]
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn measure(&self) -> &MeasureTag {
        &self.measure
    }

    pub fn grid(&self) -> &Grid {
        self.paths[0].times()
    }

    pub fn dim(&self) -> usize {
        self.paths[0].dim()
    }

    /// Short reference used in certificates and reports.
    pub fn descriptor(&self) -> String {
        format!(
            "{}#seed={}#steps={}#T={}#paths={}",
            self.measure,
            self.seed,
            self.grid().len() - 1,
            self.paths[0].horizon(),
            self.len()
        )
    }

    /// Keep every `factor`-th grid point of every path.
    pub fn coarsen(&self, factor: usize) -> Result<PathEnsemble> {
        let fine = self.grid();
        if factor == 0 || !(fine.len() - 1).is_multiple_of(factor) {
            return Err(invalid(format!("factor {factor} does not divide the grid")));
        }
        let grid: Grid = (0..=(fine.len() - 1) / factor)
            .map(|i| fine[i * factor])
            .collect::<Vec<_>>()
            .into();
        let paths = self
            .paths
            .iter()
            .map(|p| p.coarsen(factor, &grid))
            .collect::<Result<_>>()?;
        Ok(PathEnsemble { paths, seed: self.seed, measure: self.measure.clone() })
    }
}

/// Per-path random stream: ChaCha8 keyed by `seed`, stream `path_index`.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Draw `n_paths` paths from `measure` on `grid`. Each path uses its own
/// random stream, so results do not depend on thread scheduling.
pub fn sample_ensemble(
    measure: &MeasureTag,
    grid: &Grid,
    dim: usize,
    n_paths: usize,
    seed: u64,
    spec: Option<&PredictionSetSpec>,
) -> Result<PathEnsemble> {
    validate_grid(grid)?;
    if n_paths == 0 {
        return Err(invalid("n_paths must be at least 1"));
    }
    if dim == 0 {
        return Err(invalid("dimension must be positive"));
    }
    let (offset, variances): (f64, Vec<f64>) = match measure {
        MeasureTag::Brownian { vol, offset } => {
            if !vol.is_finite() || *vol < 0.0 {
                return Err(Error::MeasureRejected(format!("vol must be nonnegative, got {vol}")));
            }
            let v2 = vol * vol;
            (*offset, grid.windows(2).map(|w| v2 * (w[1] - w[0])).collect())
        }
        MeasureTag::TimeChangedBrownian { rate, offset } => {
            if rate.min_rate() < 0.0 {
                return Err(Error::MeasureRejected("rate profile must be nonnegative".into()));
            }
            (*offset, grid.windows(2).map(|w| rate.integral(w[0], w[1])).collect())
        }
        MeasureTag::Deterministic { .. } => {
            return Err(invalid(
                "deterministic ensembles are built with PathEnsemble::deterministic",
            ))
        }
    };
    if let Some(spec) = spec {
        if let Some(r) = measure.max_rate() {
            if r > spec.c {
                return Err(Error::MeasureRejected(format!(
                    "{measure} has QV slope {r} > c = {}",
                    spec.c
                )));
            }
        }
        if spec.dim != dim {
            return Err(Error::DimensionMismatch { expected: spec.dim, got: dim });
        }
    }
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let paths = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut values = Vec::with_capacity(grid.len() * dim);
            let mut state = vec![offset; dim];
            values.extend_from_slice(&state);
            for s in &sd {
                for x in state.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += s * z;
                }
                values.extend_from_slice(&state);
            }
            SamplePath::on_grid(grid.clone(), values, dim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble { paths, seed, measure: measure.clone() })
}

/// An ensemble together with the QV estimate of each path.
#[derive(Debug, Clone)]
pub struct QvEnsemble {
    pub ensemble: PathEnsemble,
    pub estimates: Vec<QvEstimate>,
}

impl QvEnsemble {
    pub fn analyze(ensemble: PathEnsemble, opts: &QvOptions) -> Result<Self> {
        let estimates = ensemble
            .paths()
            .par_iter()
            .map(|p| quadratic_variation(p, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { ensemble, estimates })
    }

    /// Pair paths with externally supplied QV paths.
    pub fn with_qv(ensemble: PathEnsemble, qvs: Vec<QvPath>) -> Result<Self> {
        if qvs.len() != ensemble.len() {
            return Err(invalid("one qv path per ensemble path is required"));
        }
        for (p, q) in ensemble.paths().iter().zip(&qvs) {
            p.check_grid(q.times(), "qv grid differs from path grid")?;
        }
        let estimates = qvs
            .into_iter()
            .map(|qv| QvEstimate { level: qv.level(), qv, converged: true, exhausted: false })
            .collect();
        Ok(Self { ensemble, estimates })
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }

    pub fn path(&self, i: usize) -> &SamplePath {
        self.ensemble.path(i)
    }

    pub fn qv(&self, i: usize) -> &QvPath {
        &self.estimates[i].qv
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SamplePath, &QvPath)> {
        self.ensemble.paths().iter().zip(self.estimates.iter().map(|e| &e.qv))
    }

    pub fn converged_fraction(&self) -> f64 {
        self.estimates.iter().filter(|e| e.converged).count() as f64 / self.len() as f64
    }
}
