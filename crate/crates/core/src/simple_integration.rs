//! Simple integrands and their pathwise integrals against `S`, `𝕊`, `⟨S⟩`
//! and finite-variation drivers.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path_space::{PathView, QvPath, SamplePath};
use crate::stats::norm;

/// A bounded linear map `ℝ^cols → ℝ^rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorValue(DMatrix<f64>);

impl OperatorValue {
    /// Entries in row-major order.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} operator needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(rows, cols, &entries))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(invalid("operator must have positive dimensions"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("operator entries must be finite"));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(invalid("ragged operator rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn scalar(a: f64) -> Self {
        Self(DMatrix::from_element(1, 1, a))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    /// A `1×d` row, i.e. a functional on `ℝ^d`.
    pub fn row(v: &[f64]) -> Self {
        Self(DMatrix::from_row_slice(1, v.len(), v))
    }

    pub fn column(v: &[f64]) -> Self {
        Self(DMatrix::from_column_slice(v.len(), 1, v))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| (0..self.cols()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        self.apply_add(v, 1.0, &mut out);
        out
    }

    /// `out += scale · self · v`.
    pub(crate) fn apply_add(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        let (r, c) = (self.rows(), self.cols());
        let data = self.0.as_slice();
        for (j, &vj) in v.iter().enumerate().take(c) {
            let w = scale * vj;
            if w == 0.0 {
                continue;
            }
            let col = &data[j * r..(j + 1) * r];
            for (o, &a) in out.iter_mut().zip(col) {
                *o += a * w;
            }
        }
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self(&self.0 * a)
    }

    pub fn try_add(&self, other: &OperatorValue) -> Result<Self> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::DimensionMismatch { expected: self.cols(), got: other.cols() });
        }
        Ok(Self(&self.0 + &other.0))
    }

    pub fn compose(&self, other: &OperatorValue) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(Error::DimensionMismatch { expected: self.cols(), got: other.rows() });
        }
        Ok(Self(&self.0 * &other.0))
    }

    pub fn operator_norm(&self) -> f64 {
        operator_norm(self)
    }

    pub fn operator_norm_sq(&self) -> f64 {
        let n = operator_norm(self);
        n * n
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl fmt::Display for OperatorValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_rows())
    }
}

/// Largest singular value. Rows and columns reduce to the Euclidean norm.
pub fn operator_norm(f: &OperatorValue) -> f64 {
    let m = f.matrix();
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.clone().singular_values().max()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Explicit per-path stopping indices.
    Resolved,
    /// Produced by evaluating a nonanticipating rule; the string names it.
    Rule(String),
}

/// Operator coefficients on left-open grid intervals `(τ_n, τ_{n+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleIntegrand {
    stops: Vec<usize>,
    coeffs: Vec<OperatorValue>,
    provenance: Provenance,
}

impl SimpleIntegrand {
    /// `stops` are grid indices starting at 0; the last is the final grid
    /// index of every path the integrand is applied to.
    pub fn new(stops: Vec<usize>, coeffs: Vec<OperatorValue>) -> Result<Self> {
        if stops.len() < 2 || stops[0] != 0 {
            return Err(invalid("stops must start at index 0 and contain the final index"));
        }
        if stops.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("stops must be nondecreasing"));
        }
        if coeffs.len() + 1 != stops.len() {
            return Err(invalid(format!(
                "{} stops need {} coefficients, got {}",
                stops.len(),
                stops.len() - 1,
                coeffs.len()
            )));
        }
        let (r, c) = (coeffs[0].rows(), coeffs[0].cols());
        if let Some(bad) = coeffs.iter().find(|f| f.rows() != r || f.cols() != c) {
            return Err(Error::DimensionMismatch { expected: c, got: bad.cols() });
        }
        Ok(Self { stops, coeffs, provenance: Provenance::Resolved })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// One coefficient on `(0, T]`.
    pub fn constant(f: OperatorValue, last_index: usize) -> Self {
        Self { stops: vec![0, last_index], coeffs: vec![f], provenance: Provenance::Resolved }
    }

    pub fn zero(rows: usize, cols: usize, last_index: usize) -> Self {
        Self::constant(OperatorValue::zeros(rows, cols), last_index)
    }

    /// Scalar coefficients on the given stops.
    pub fn scalar_pieces(stops: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(stops, values.iter().map(|&v| OperatorValue::scalar(v)).collect())
    }

    /// Deterministic stops given as times, each rounded up to the first grid
    /// point not earlier than it.
    pub fn from_times(times: &[f64], grid: &[f64], coeffs: Vec<OperatorValue>) -> Result<Self> {
        let horizon = grid[grid.len() - 1];
        if times.first() != Some(&0.0) {
            return Err(invalid("deterministic stops must start at 0"));
        }
        if (times[times.len() - 1] - horizon).abs() > 1e-12 * horizon {
            return Err(invalid(format!("deterministic stops must end at T = {horizon}")));
        }
        let stops = times
            .iter()
            .map(|&t| grid_index_at_or_after(grid, t))
            .collect::<Vec<_>>();
        Self::new(stops, coeffs)
    }

    pub fn stops(&self) -> &[usize] {
        &self.stops
    }

    pub fn coeffs(&self) -> &[OperatorValue] {
        &self.coeffs
    }

    pub fn coeff(&self, n: usize) -> &OperatorValue {
        &self.coeffs[n]
    }

    pub fn pieces(&self) -> usize {
        self.coeffs.len()
    }

    pub fn rows(&self) -> usize {
        self.coeffs[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.coeffs[0].cols()
    }

    pub fn last_index(&self) -> usize {
        self.stops[self.stops.len() - 1]
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// For each grid step `j → j+1`, the piece whose interval contains it.
    pub fn step_pieces(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.last_index());
        for (n, w) in self.stops.windows(2).enumerate() {
            out.extend(std::iter::repeat_n(n, w[1] - w[0]));
        }
        out
    }

    /// Coefficient in force on the grid step starting at index `j`.
    pub fn coefficient_for_step(&self, j: usize) -> &OperatorValue {
        let n = self.stops.partition_point(|&s| s <= j).saturating_sub(1);
        &self.coeffs[n.min(self.coeffs.len() - 1)]
    }

    /// Insert extra stops, repeating the coefficient in force.
    pub fn refine(&self, extra: &[usize]) -> Result<Self> {
        if extra.iter().any(|&s| s > self.last_index()) {
            return Err(invalid("refining stop beyond the final index"));
        }
        let mut stops: Vec<usize> = self.stops.iter().chain(extra).copied().collect();
        stops.sort_unstable();
        stops.dedup();
        let coeffs = stops
            .windows(2)
            .map(|w| self.coefficient_for_step(w[0]).clone())
            .collect();
        Ok(Self { stops, coeffs, provenance: self.provenance.clone() })
    }

    /// `a·self + b·other` on the union of both stop sets.
    pub fn linear_combination(&self, a: f64, other: &SimpleIntegrand, b: f64) -> Result<Self> {
        if self.last_index() != other.last_index() {
            return Err(Error::GridMismatch("integrands end at different indices".into()));
        }
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::DimensionMismatch { expected: self.cols(), got: other.cols() });
        }
        let mut stops: Vec<usize> = self.stops.iter().chain(&other.stops).copied().collect();
        stops.sort_unstable();
        stops.dedup();
        let coeffs = stops
            .windows(2)
            .map(|w| {
                self.coefficient_for_step(w[0])
                    .scaled(a)
                    .try_add(&other.coefficient_for_step(w[0]).scaled(b))
            })
            .collect::<Result<_>>()?;
        Ok(Self { stops, coeffs, provenance: Provenance::Resolved })
    }

    pub fn try_add(&self, other: &SimpleIntegrand) -> Result<Self> {
        self.linear_combination(1.0, other, 1.0)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            stops: self.stops.clone(),
            coeffs: self.coeffs.iter().map(|f| f.scaled(a)).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// `t ↦ ‖F_t‖²` as a scalar simple integrand.
    pub fn norm_sq_integrand(&self) -> Self {
        Self {
            stops: self.stops.clone(),
            coeffs: self
                .coeffs
                .iter()
                .map(|f| OperatorValue::scalar(f.operator_norm_sq()))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// `Π_i ∘ F`, the i-th output coordinate as a `1×cols` integrand.
    pub fn output_row(&self, i: usize) -> Self {
        Self {
            stops: self.stops.clone(),
            coeffs: self
                .coeffs
                .iter()
                .map(|f| OperatorValue::row(&f.to_rows()[i]))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Largest coefficient operator norm.
    pub fn sup_norm(&self) -> f64 {
        self.coeffs.iter().map(operator_norm).fold(0.0, f64::max)
    }

    fn check_against(&self, n: &SamplePath) -> Result<()> {
        if self.last_index() != n.last_index() {
            return Err(Error::GridMismatch(format!(
                "integrand ends at index {}, path at {}",
                self.last_index(),
                n.last_index()
            )));
        }
        if self.cols() != n.dim() {
            return Err(Error::DimensionMismatch { expected: self.cols(), got: n.dim() });
        }
        Ok(())
    }
}

pub(crate) fn grid_index_at_or_after(grid: &[f64], t: f64) -> usize {
    let horizon = grid[grid.len() - 1];
    let target = t - 1e-12 * horizon;
    grid.partition_point(|&s| s < target).min(grid.len() - 1)
}

/// `(F·N)_t = Σ_n f_n (N_{τ_{n+1}∧t} − N_{τ_n∧t})` at every grid time.
pub fn integrate_simple(f: &SimpleIntegrand, n: &SamplePath) -> Result<SamplePath> {
    f.check_against(n)?;
    let dk = f.rows();
    let dh = n.dim();
    let mut values = vec![0.0; n.len() * dk];
    let mut acc = vec![0.0; dk];
    let mut inc = vec![0.0; dh];
    for (piece, w) in f.stops.windows(2).enumerate() {
        let coeff = &f.coeffs[piece];
        for j in w[0]..w[1] {
            let (a, b) = (n.value(j), n.value(j + 1));
            for ((d, x), y) in inc.iter_mut().zip(a).zip(b) {
                *d = y - x;
            }
            coeff.apply_add(&inc, 1.0, &mut acc);
            values[(j + 1) * dk..(j + 2) * dk].copy_from_slice(&acc);
        }
    }
    n.with_values(values, dk)
}

/// Left-point Lebesgue–Stieltjes sum `Σ g(t_i)(⟨ω⟩_{t_{i+1}} − ⟨ω⟩_{t_i})`.
pub fn integrate_stieltjes(g: &SamplePath, qv: &QvPath) -> Result<SamplePath> {
    g.check_grid(qv.times(), "integrand and qv grids differ")?;
    if g.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: g.dim() });
    }
    let mut values = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    values.push(0.0);
    for i in 0..g.last_index() {
        acc += g.scalar_at(i) * (qv.at(i + 1) - qv.at(i));
        values.push(acc);
    }
    g.with_values(values, 1)
}

/// `(‖F‖²·⟨S⟩)` along the stops of `F`.
pub fn norm_sq_against_qv(f: &SimpleIntegrand, qv: &QvPath) -> Result<SamplePath> {
    integrate_simple(&f.norm_sq_integrand(), &qv.as_path())
}

/// Continuity modulus `‖F_t − F_s‖ ≤ ρ(|t−s|)(1 + sup_r ‖S_r‖^p)`.
#[derive(Clone)]
pub struct Modulus {
    pub rho: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub p: f64,
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Modulus").field("p", &self.p).finish_non_exhaustive()
    }
}

impl Modulus {
    /// `ρ(h) = k·h` with `p = 1`.
    pub fn linear(k: f64) -> Self {
        Self { rho: Arc::new(move |h| k * h), p: 1.0 }
    }

    pub fn rho(&self, h: f64) -> f64 {
        (self.rho)(h)
    }

    /// A-priori `‖F − F^N‖²_{𝓗²}` bound for the `N`-piece deterministic-stop
    /// approximation on paths with QV slope at most `c`.
    pub fn h2_distance_sq_bound(&self, pieces: usize, c: f64, horizon: f64) -> f64 {
        let r = self.rho(horizon / pieces as f64);
        r * r * (1.0 + (horizon * c).powf(self.p / 2.0)) * horizon
    }
}

pub type Evaluator = Arc<dyn Fn(&PathView<'_>) -> OperatorValue + Send + Sync>;

/// `F: [0,T] × Ω → L(ℝ^cols, ℝ^rows)`, evaluated on the path observed so far.
#[derive(Clone)]
pub struct OperatorPathFunctional {
    rows: usize,
    cols: usize,
    evaluator: Evaluator,
    pub modulus: Option<Modulus>,
    pub lipschitz_in_time: Option<f64>,
    label: String,
}

impl fmt::Debug for OperatorPathFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorPathFunctional")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("label", &self.label)
            .field("modulus", &self.modulus)
            .field("lipschitz_in_time", &self.lipschitz_in_time)
            .finish()
    }
}

impl OperatorPathFunctional {
    pub fn new(
        rows: usize,
        cols: usize,
        label: impl Into<String>,
        evaluator: impl Fn(&PathView<'_>) -> OperatorValue + Send + Sync + 'static,
    ) -> Self {
        Self {
            rows,
            cols,
            evaluator: Arc::new(evaluator),
            modulus: None,
            lipschitz_in_time: None,
            label: label.into(),
        }
    }

    pub fn constant(f: OperatorValue) -> Self {
        let (r, c) = (f.rows(), f.cols());
        let label = format!("constant{f}");
        let mut out = Self::new(r, c, label, move |_| f.clone());
        out.modulus = Some(Modulus::linear(0.0));
        out.lipschitz_in_time = Some(0.0);
        out
    }

    /// `F_t = g(t)` for a deterministic `g`.
    pub fn deterministic(
        rows: usize,
        cols: usize,
        label: impl Into<String>,
        g: impl Fn(f64) -> OperatorValue + Send + Sync + 'static,
    ) -> Self {
        Self::new(rows, cols, label, move |v| g(v.time()))
    }

    pub fn with_modulus(mut self, modulus: Modulus) -> Self {
        self.modulus = Some(modulus);
        self
    }

    pub fn with_lipschitz_in_time(mut self, l: f64) -> Self {
        self.lipschitz_in_time = Some(l);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, view: &PathView<'_>) -> Result<OperatorValue> {
        let v = (self.evaluator)(view);
        if v.rows() != self.rows || v.cols() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: v.cols() });
        }
        Ok(v)
    }

    /// `F − G` pointwise.
    pub fn difference(&self, other: &OperatorPathFunctional) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, got: other.cols });
        }
        let (a, b) = (self.evaluator.clone(), other.evaluator.clone());
        let label = format!("({})-({})", self.label, other.label);
        Ok(Self::new(self.rows, self.cols, label, move |v| {
            OperatorValue(a(v).0 - b(v).0)
        }))
    }
}

/// Deterministic-stop approximation with `N` pieces: stops `(nT/N) ∧ T`
/// rounded up to the grid, coefficient on `(τ_n, τ_{n+1}]` equal to `F`
/// evaluated on the path stopped at `τ_n`. The flag reports that rounding
/// merged stops, i.e. `N` exceeded the grid resolution.
pub fn coerce_to_simple(
    f: &OperatorPathFunctional,
    path: &SamplePath,
    pieces: usize,
) -> Result<(SimpleIntegrand, bool)> {
    if pieces == 0 {
        return Err(invalid("piece count must be at least 1"));
    }
    if f.cols() != path.dim() {
        return Err(Error::DimensionMismatch { expected: f.cols(), got: path.dim() });
    }
    let grid = path.times();
    let horizon = path.horizon();
    let mut stops: Vec<usize> = (0..=pieces)
        .map(|n| grid_index_at_or_after(grid, horizon * n as f64 / pieces as f64))
        .collect();
    stops[pieces] = path.last_index();
    let before = stops.len();
    stops.dedup();
    let clamped = stops.len() < before;
    let coeffs = stops[..stops.len() - 1]
        .iter()
        .map(|&s| f.eval(&path.view(s)))
        .collect::<Result<_>>()?;
    let integrand = SimpleIntegrand::new(stops, coeffs)?
        .with_provenance(Provenance::Rule(f.label().to_string()));
    Ok((integrand, clamped))
}

/// Coefficient `F_{t_i}` on every grid step.
pub fn coerce_at_grid(f: &OperatorPathFunctional, path: &SamplePath) -> Result<SimpleIntegrand> {
    Ok(coerce_to_simple(f, path, path.last_index())?.0)
}

pub enum FvIntegrand<'a> {
    Simple(&'a SimpleIntegrand),
    /// A functional evaluated along `path` at grid resolution.
    Functional {
        f: &'a OperatorPathFunctional,
        path: &'a SamplePath,
    },
}

/// Largest `|ΔA/Δt|` over grid steps.
pub fn max_slope(a: &SamplePath) -> f64 {
    (0..a.last_index())
        .map(|i| (a.scalar_at(i + 1) - a.scalar_at(i)).abs() / (a.time(i + 1) - a.time(i)))
        .fold(0.0, f64::max)
}

/// Left-point integral against a scalar driver whose slope is at most
/// `c·(1 + slack)`.
pub fn integrate_fv(f: FvIntegrand<'_>, a: &SamplePath, c: f64, slack: f64) -> Result<SamplePath> {
    if a.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: a.dim() });
    }
    let slope = max_slope(a);
    let limit = c * (1.0 + slack);
    if slope > limit {
        return Err(Error::SlopeBound { slope, limit });
    }
    match f {
        FvIntegrand::Simple(s) => integrate_simple(s, a),
        FvIntegrand::Functional { f, path } => {
            a.check_grid(path.times(), "driver and state grids differ")?;
            integrate_simple(&coerce_at_grid(f, path)?, a)
        }
    }
}

/// Both sides of `sup_t ‖(F·A)_t‖² ≤ s²T·Σ‖f_i‖²Δt_i`, where `s` is the
/// observed maximal slope of `A`.
pub fn fv_energy_bound(f: &SimpleIntegrand, a: &SamplePath) -> Result<(f64, f64)> {
    let fa = integrate_simple(f, a)?;
    let lhs = (0..fa.len())
        .map(|i| {
            let n = norm(fa.value(i));
            n * n
        })
        .fold(0.0, f64::max);
    let s = max_slope(a);
    let energy: f64 = f
        .step_pieces()
        .iter()
        .enumerate()
        .map(|(j, &n)| f.coeff(n).operator_norm_sq() * (a.time(j + 1) - a.time(j)))
        .sum();
    Ok((lhs, s * s * a.horizon() * energy))
}

/// Integrand specification, as stored in JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrandSpec {
    /// Deterministic stop times `0 = t_0 < … < t_n = T` and one matrix per interval.
    Deterministic {
        stops: Vec<f64>,
        coeffs: Vec<Vec<Vec<f64>>>,
    },
    Identity { dim: usize },
    Constant { matrix: Vec<Vec<f64>> },
    /// `F_t = t·M`.
    TimeLinear { matrix: Vec<Vec<f64>> },
    /// `F_t = cos(2π·frequency·t)·M`.
    Cosine {
        matrix: Vec<Vec<f64>>,
        frequency: f64,
    },
    /// `F_t(ω) = scale·ω(t)ᵀ`, a `1×d` row.
    StateFeedback { scale: f64 },
}

impl IntegrandSpec {
    pub fn unit() -> Self {
        IntegrandSpec::Identity { dim: 1 }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("integrand spec serializes")
    }

    /// Input dimension, when fixed by the spec.
    pub fn cols(&self) -> Option<usize> {
        match self {
            IntegrandSpec::Deterministic { coeffs, .. } => {
                coeffs.first().and_then(|m| m.first()).map(|r| r.len())
            }
            IntegrandSpec::Identity { dim } => Some(*dim),
            IntegrandSpec::Constant { matrix }
            | IntegrandSpec::TimeLinear { matrix }
            | IntegrandSpec::Cosine { matrix, .. } => matrix.first().map(|r| r.len()),
            IntegrandSpec::StateFeedback { .. } => None,
        }
    }

    /// As a functional on paths of dimension `dim`. Deterministic stops are
    /// looked up on the grid of the path being evaluated.
    pub fn to_functional(&self, dim: usize) -> Result<OperatorPathFunctional> {
        if let Some(c) = self.cols() {
            if c != dim {
                return Err(Error::DimensionMismatch { expected: c, got: dim });
            }
        }
        Ok(match self.clone() {
            IntegrandSpec::Deterministic { stops, coeffs } => {
                let ops: Vec<OperatorValue> =
                    coeffs.iter().map(|m| OperatorValue::from_rows(m)).collect::<Result<_>>()?;
                if ops.len() + 1 != stops.len() {
                    return Err(invalid("deterministic integrand needs one matrix per interval"));
                }
                let (r, c) = (ops[0].rows(), ops[0].cols());
                OperatorPathFunctional::deterministic(r, c, "deterministic", move |t| {
                    // the value at t_n is the coefficient on (t_n, t_{n+1}]
                    let n = stops.partition_point(|&s| s <= t).saturating_sub(1);
                    ops[n.min(ops.len() - 1)].clone()
                })
            }
            IntegrandSpec::Identity { dim } => OperatorPathFunctional::constant(OperatorValue::identity(dim)),
            IntegrandSpec::Constant { matrix } => {
                OperatorPathFunctional::constant(OperatorValue::from_rows(&matrix)?)
            }
            IntegrandSpec::TimeLinear { matrix } => {
                let m = OperatorValue::from_rows(&matrix)?;
                let k = m.operator_norm();
                OperatorPathFunctional::deterministic(m.rows(), m.cols(), "time_linear", move |t| m.scaled(t))
                    .with_modulus(Modulus::linear(k))
                    .with_lipschitz_in_time(k)
            }
            IntegrandSpec::Cosine { matrix, frequency } => {
                let m = OperatorValue::from_rows(&matrix)?;
                let k = m.operator_norm() * std::f64::consts::TAU * frequency.abs();
                OperatorPathFunctional::deterministic(m.rows(), m.cols(), "cosine", move |t| {
                    m.scaled((std::f64::consts::TAU * frequency * t).cos())
                })
                .with_modulus(Modulus::linear(k))
                .with_lipschitz_in_time(k)
            }
            IntegrandSpec::StateFeedback { scale } => {
                OperatorPathFunctional::new(1, dim, "state_feedback", move |v| {
                    OperatorValue::row(v.current()).scaled(scale)
                })
            }
        })
    }

    /// Resolve on one path: deterministic stops exactly, anything else at
    /// grid resolution.
    pub fn resolve(&self, path: &SamplePath) -> Result<SimpleIntegrand> {
        match self {
            IntegrandSpec::Deterministic { stops, coeffs } => {
                let ops = coeffs.iter().map(|m| OperatorValue::from_rows(m)).collect::<Result<_>>()?;
                SimpleIntegrand::from_times(stops, path.times(), ops)
            }
            IntegrandSpec::Identity { .. } | IntegrandSpec::Constant { .. } if self.cols() == Some(path.dim()) => {
                let f = self.to_functional(path.dim())?;
                Ok(SimpleIntegrand::constant(f.eval(&path.view(0))?, path.last_index()))
            }
            _ => coerce_at_grid(&self.to_functional(path.dim())?, path),
        }
    }
}
