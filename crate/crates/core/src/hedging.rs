//! Second-order hedging: the integrand `F̃` of the weak Itô isometry, the
//! deterministic pathwise Doob/BDG inequality, explicit BDG superhedging
//! strategies and their verification on path ensembles.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path_space::{crossing_partition, ss_process, QvEnsemble, QvPath, SamplePath};
use crate::simple_integration::{
    integrate_simple, norm_sq_against_qv, IntegrandSpec, OperatorValue, SimpleIntegrand,
};
use crate::stats::{norm_sq, pairwise_sum};

/// `F̃` with coefficient `2(f_nᵀ (F·S)_{τ_n} − ‖f_n‖² S_{τ_n})ᵀ` on
/// `(τ_n, τ_{n+1}]`. Only data up to `τ_n` enters piece `n`.
pub fn tilde_integrand(f: &SimpleIntegrand, path: &SamplePath) -> Result<SimpleIntegrand> {
    let x = integrate_simple(f, path)?;
    let dh = path.dim();
    let coeffs = f
        .stops()
        .windows(2)
        .zip(f.coeffs())
        .map(|(w, fn_)| {
            let tau = w[0];
            let xs = x.value(tau);
            let s = path.value(tau);
            let nsq = fn_.operator_norm_sq();
            let row: Vec<f64> = (0..dh)
                .map(|j| {
                    let adj: f64 = (0..fn_.rows()).map(|k| fn_.get(k, j) * xs[k]).sum();
                    2.0 * (adj - nsq * s[j])
                })
                .collect();
            OperatorValue::row(&row)
        })
        .collect();
    SimpleIntegrand::new(f.stops().to_vec(), coeffs).map(|g| g.with_provenance(f.provenance().clone()))
}

/// The terms of `‖(F·S)_t‖² ≤ (F̃·S)_t + (‖F‖²·𝕊)_t + (‖F‖²·⟨S⟩)_t`.
#[derive(Debug, Clone)]
pub struct ItoDecomposition {
    /// `‖(F·S)_t‖²`.
    pub lhs: Vec<f64>,
    pub tilde: Vec<f64>,
    pub second: Vec<f64>,
    pub bracket: Vec<f64>,
}

impl ItoDecomposition {
    pub fn residual(&self) -> Vec<f64> {
        (0..self.lhs.len())
            .map(|i| self.tilde[i] + self.second[i] + self.bracket[i] - self.lhs[i])
            .collect()
    }

    /// Magnitude of the largest term, for relative tolerances.
    pub fn scale(&self) -> f64 {
        [&self.lhs, &self.tilde, &self.second, &self.bracket]
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

pub fn ito_decomposition(f: &SimpleIntegrand, path: &SamplePath, qv: &QvPath) -> Result<ItoDecomposition> {
    let x = integrate_simple(f, path)?;
    let ft = integrate_simple(&tilde_integrand(f, path)?, path)?;
    let ss = ss_process(path, qv)?;
    let nsq = f.norm_sq_integrand();
    let second = integrate_simple(&nsq, &ss)?;
    let bracket = integrate_simple(&nsq, &qv.as_path())?;
    Ok(ItoDecomposition {
        lhs: (0..x.len()).map(|i| norm_sq(x.value(i))).collect(),
        tilde: ft.values().to_vec(),
        second: second.values().to_vec(),
        bracket: bracket.values().to_vec(),
    })
}

/// RHS − LHS of the weak Itô isometry at every grid time.
pub fn ito_decomposition_residual(f: &SimpleIntegrand, path: &SamplePath, qv: &QvPath) -> Result<SamplePath> {
    let d = ito_decomposition(f, path, qv)?;
    path.with_values(d.residual(), 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdgSides {
    pub lhs: f64,
    pub rhs: f64,
}

impl BdgSides {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.rhs + tol * self.rhs.abs().max(1.0)
    }
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `max_n x_n² ≤ 4x_N² − 4Σ_{n<N} (max_{i≤n}|x_i|)·sgn(x_n)·(x_{n+1} − x_n)`.
///
/// For nonnegative sequences this is the classical pathwise Doob inequality
/// with running maximum `max_{i≤n} x_i`; the sign factor keeps it valid for
/// sequences of either sign.
pub fn pathwise_bdg_check(x: &[f64]) -> Result<BdgSides> {
    if x.is_empty() {
        return Err(invalid("sequence must be nonempty"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("sequence entries must be finite"));
    }
    let lhs = x.iter().map(|v| v * v).fold(0.0, f64::max);
    let mut running = 0.0f64;
    let mut terms = Vec::with_capacity(x.len());
    for n in 0..x.len() - 1 {
        running = running.max(x[n].abs());
        terms.push(running * sign(x[n]) * (x[n + 1] - x[n]));
    }
    let last = x[x.len() - 1];
    Ok(BdgSides { lhs, rhs: 4.0 * last * last - 4.0 * pairwise_sum(&terms) })
}

/// The inequality with the plain running maximum `max_{i≤n} x_i`, which is
/// only valid for nonnegative sequences.
pub fn running_max_rhs(x: &[f64]) -> Result<BdgSides> {
    if x.is_empty() {
        return Err(invalid("sequence must be nonempty"));
    }
    let lhs = x.iter().map(|v| v * v).fold(0.0, f64::max);
    let mut running = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for n in 0..x.len() - 1 {
        running = running.max(x[n]);
        sum += running * (x[n + 1] - x[n]);
    }
    let last = x[x.len() - 1];
    Ok(BdgSides { lhs, rhs: 4.0 * last * last - 4.0 * sum })
}

/// Refining partition used by the BDG strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionLevel {
    /// Stops of `F` merged with the crossing partitions of levels `0..=m`.
    Crossing(u32),
    /// Every grid index.
    Full,
}

/// Stocks `H ∈ 𝓗_s(H, ℝ)`, second-order holdings `G ∈ 𝓗_s(ℝ, ℝ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPair {
    pub stock: SimpleIntegrand,
    pub second: SimpleIntegrand,
}

impl StrategyPair {
    pub fn zero(dim: usize, last_index: usize) -> Self {
        Self {
            stock: SimpleIntegrand::zero(1, dim, last_index),
            second: SimpleIntegrand::zero(1, 1, last_index),
        }
    }

    pub fn try_add(&self, other: &StrategyPair) -> Result<Self> {
        Ok(Self {
            stock: self.stock.try_add(&other.stock)?,
            second: self.second.try_add(&other.second)?,
        })
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { stock: self.stock.scaled(a), second: self.second.scaled(a) }
    }

    /// `λ + (H·S)_t + (G·𝕊)_t` at every grid time.
    pub fn wealth(&self, lambda: f64, path: &SamplePath, ss: &SamplePath) -> Result<Vec<f64>> {
        let hs = integrate_simple(&self.stock, path)?;
        let gs = integrate_simple(&self.second, ss)?;
        Ok((0..path.len())
            .map(|i| lambda + hs.scalar_at(i) + gs.scalar_at(i))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdgStrategy {
    pub pair: StrategyPair,
    /// `4(‖F‖²·⟨S⟩)_T` on this path.
    pub lambda_core: f64,
    /// The merged partition `σ_0 < σ_1 < …`.
    pub stops: Vec<usize>,
}

fn merged_stops(f: &SimpleIntegrand, path: &SamplePath, level: PartitionLevel) -> Vec<usize> {
    let mut stops: Vec<usize> = match level {
        PartitionLevel::Full => (0..path.len()).collect(),
        PartitionLevel::Crossing(m) => {
            let mut s = f.stops().to_vec();
            for j in 0..=m {
                s.extend(crossing_partition(path, j).stop_indices);
            }
            s
        }
    };
    stops.sort_unstable();
    stops.dedup();
    stops
}

/// The explicit strategy with
/// `0 ≤ max_n (F·S)²_{σ_n∧t} ≤ λ + (H·S)_t + (G·𝕊)_t` for `λ ≥ λ_core`,
/// where `H = 4F̃ + H̃`, `H̃ = −4Σ_n M_n sgn((F·S)_{σ_n}) F_{σ_n} 1_{(σ_n, σ_{n+1}]}`,
/// `M_n = max_{i≤n} |(F·S)_{σ_i}|` and `G = 4‖F‖²`.
pub fn bdg_strategy(
    f: &SimpleIntegrand,
    path: &SamplePath,
    qv: &QvPath,
    level: PartitionLevel,
) -> Result<BdgStrategy> {
    if f.rows() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: f.rows() });
    }
    let stops = merged_stops(f, path, level);
    let refined = f.refine(&stops)?;
    let x = integrate_simple(&refined, path)?;
    let tilde = tilde_integrand(&refined, path)?;
    let mut running = 0.0f64;
    let coeffs = refined
        .stops()
        .windows(2)
        .zip(refined.coeffs())
        .zip(tilde.coeffs())
        .map(|((w, fn_), ft)| {
            let y = x.scalar_at(w[0]);
            running = running.max(y.abs());
            let h_tilde = fn_.scaled(-4.0 * running * sign(y));
            ft.scaled(4.0).try_add(&h_tilde)
        })
        .collect::<Result<Vec<_>>>()?;
    let stock = SimpleIntegrand::new(refined.stops().to_vec(), coeffs)?;
    let second = refined.norm_sq_integrand().scaled(4.0);
    let lambda_core = 4.0 * norm_sq_against_qv(f, qv)?.scalar_at(path.last_index());
    Ok(BdgStrategy { pair: StrategyPair { stock, second }, lambda_core, stops })
}

/// The scalar construction applied to each output coordinate of `F`, summed.
/// Certifies `Σ_i max_n (F^i·S)²_{σ_n} ≥ max_n ‖(F·S)_{σ_n}‖²`.
pub fn bdg_strategy_coordinatewise(
    f: &SimpleIntegrand,
    path: &SamplePath,
    qv: &QvPath,
    level: PartitionLevel,
) -> Result<BdgStrategy> {
    let mut total: Option<BdgStrategy> = None;
    for i in 0..f.rows() {
        let s = bdg_strategy(&f.output_row(i), path, qv, level)?;
        total = Some(match total {
            None => s,
            Some(acc) => BdgStrategy {
                pair: acc.pair.try_add(&s.pair)?,
                lambda_core: acc.lambda_core + s.lambda_core,
                stops: acc.stops,
            },
        });
    }
    Ok(total.expect("integrand has at least one row"))
}

/// Something evaluated per path to produce a strategy sequence.
pub trait StrategySource: Sync {
    fn strategies(&self, path: &SamplePath, qv: &QvPath) -> Result<Vec<StrategyPair>>;
}

impl StrategySource for Vec<StrategyPair> {
    fn strategies(&self, _: &SamplePath, _: &QvPath) -> Result<Vec<StrategyPair>> {
        Ok(self.clone())
    }
}

/// Serializable strategy recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StrategyRule {
    /// No trading.
    Cash,
    /// BDG strategies for crossing levels `0..=max_level`, followed by the
    /// full-grid strategy when `full` is set.
    Bdg {
        integrand: IntegrandSpec,
        max_level: u32,
        #[serde(default = "default_true")]
        full: bool,
    },
    /// The single strategy `(F̃, ‖F‖²)` of the weak Itô isometry.
    ItoIsometry { integrand: IntegrandSpec },
    Scaled { factor: f64, inner: Box<StrategyRule> },
    /// The k-th strategy is the sum of the k-th strategies of the first
    /// `k+1` parts (a part's last strategy is reused once it runs out).
    PartialSums { parts: Vec<StrategyRule> },
}

fn default_true() -> bool {
    true
}

impl StrategyRule {
    pub fn bdg(integrand: IntegrandSpec, max_level: u32) -> Self {
        StrategyRule::Bdg { integrand, max_level, full: true }
    }
}

impl StrategySource for StrategyRule {
    fn strategies(&self, path: &SamplePath, qv: &QvPath) -> Result<Vec<StrategyPair>> {
        match self {
            StrategyRule::Cash => Ok(Vec::new()),
            StrategyRule::Bdg { integrand, max_level, full } => {
                let f = integrand.resolve(path)?;
                let mut levels: Vec<PartitionLevel> =
                    (0..=*max_level).map(PartitionLevel::Crossing).collect();
                if *full {
                    levels.push(PartitionLevel::Full);
                }
                levels
                    .into_iter()
                    .map(|l| bdg_strategy_coordinatewise(&f, path, qv, l).map(|s| s.pair))
                    .collect()
            }
            StrategyRule::ItoIsometry { integrand } => {
                let f = integrand.resolve(path)?;
                Ok(vec![StrategyPair {
                    stock: tilde_integrand(&f, path)?,
                    second: f.norm_sq_integrand(),
                }])
            }
            StrategyRule::Scaled { factor, inner } => Ok(inner
                .strategies(path, qv)?
                .iter()
                .map(|p| p.scaled(*factor))
                .collect()),
            StrategyRule::PartialSums { parts } => {
                let seqs = parts
                    .iter()
                    .map(|p| p.strategies(path, qv))
                    .collect::<Result<Vec<_>>>()?;
                let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
                if len == 0 {
                    return Ok(Vec::new());
                }
                let len = len.max(parts.len());
                (0..len)
                    .map(|k| {
                        let mut acc = StrategyPair::zero(path.dim(), path.last_index());
                        for seq in seqs.iter().take(k + 1) {
                            if let Some(p) = seq.get(k.min(seq.len().wrapping_sub(1))) {
                                acc = acc.try_add(p)?;
                            }
                        }
                        Ok(acc)
                    })
                    .collect()
            }
        }
    }
}

/// A payoff `X(ω)` evaluated from the path and its QV.
pub trait Payoff: Sync {
    fn evaluate(&self, path: &SamplePath, qv: &QvPath) -> Result<f64>;
}

/// Wraps a closure as a payoff.
pub struct FnPayoff<F>(pub F);

impl<F> Payoff for FnPayoff<F>
where
    F: Fn(&SamplePath, &QvPath) -> f64 + Sync,
{
    fn evaluate(&self, path: &SamplePath, qv: &QvPath) -> Result<f64> {
        Ok((self.0)(path, qv))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffSpec {
    Zero,
    Constant { value: f64 },
    /// `⟨S⟩_T`.
    TerminalQv,
    /// `sup_t ‖(F·S)_t‖²` over the grid.
    SupIntegralSq { integrand: IntegrandSpec },
    /// `‖(F·S)_T‖²`.
    TerminalIntegralSq { integrand: IntegrandSpec },
    /// `sup_t ‖S_t − S_0‖²`.
    SupSq,
    Scaled { factor: f64, inner: Box<PayoffSpec> },
    Sum { parts: Vec<PayoffSpec> },
}

impl fmt::Display for PayoffSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PayoffSpec::Zero => write!(f, "zero"),
            PayoffSpec::Constant { value } => write!(f, "constant({value})"),
            PayoffSpec::TerminalQv => write!(f, "qv_T"),
            PayoffSpec::SupIntegralSq { .. } => write!(f, "sup_integral_sq"),
            PayoffSpec::TerminalIntegralSq { .. } => write!(f, "terminal_integral_sq"),
            PayoffSpec::SupSq => write!(f, "sup_sq"),
            PayoffSpec::Scaled { factor, inner } => write!(f, "{factor}*{inner}"),
            PayoffSpec::Sum { parts } => {
                let names: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                write!(f, "sum({})", names.join(","))
            }
        }
    }
}

impl Payoff for PayoffSpec {
    fn evaluate(&self, path: &SamplePath, qv: &QvPath) -> Result<f64> {
        Ok(match self {
            PayoffSpec::Zero => 0.0,
            PayoffSpec::Constant { value } => *value,
            PayoffSpec::TerminalQv => qv.terminal(),
            PayoffSpec::SupIntegralSq { integrand } => {
                let x = integrate_simple(&integrand.resolve(path)?, path)?;
                (0..x.len()).map(|i| norm_sq(x.value(i))).fold(0.0, f64::max)
            }
            PayoffSpec::TerminalIntegralSq { integrand } => {
                let x = integrate_simple(&integrand.resolve(path)?, path)?;
                norm_sq(x.value(x.last_index()))
            }
            PayoffSpec::SupSq => {
                let start = path.value(0);
                (0..path.len())
                    .map(|i| {
                        path.value(i)
                            .iter()
                            .zip(start)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max)
            }
            PayoffSpec::Scaled { factor, inner } => factor * inner.evaluate(path, qv)?,
            PayoffSpec::Sum { parts } => {
                let mut total = 0.0;
                for p in parts {
                    total += p.evaluate(path, qv)?;
                }
                total
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Absolute tolerance; `None` means `1e-9·(1 + |λ|)`.
    pub tol: Option<f64>,
    /// First strategy index of the tail used for the liminf; `None` uses the
    /// last strategy only.
    pub tail_start: Option<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMargin {
    /// `min_k min_t` wealth.
    pub admissibility: f64,
    /// Tail-minimum terminal wealth minus the payoff.
    pub domination: f64,
    pub payoff: f64,
    pub strategies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperhedgeReport {
    pub lambda: f64,
    pub tol: f64,
    pub paths: usize,
    pub admissibility_failures: usize,
    pub domination_failures: usize,
    pub worst_admissibility_margin: f64,
    pub worst_domination_margin: f64,
    /// Largest tail start index used over the ensemble.
    pub truncation_index: Option<usize>,
    pub passed: bool,
    pub diagnostic: Option<String>,
    pub per_path: Vec<PathMargin>,
}

fn verify_path(
    lambda: f64,
    strategies: &dyn StrategySource,
    path: &SamplePath,
    qv: &QvPath,
    payoff: &dyn Payoff,
    tail_start: Option<usize>,
) -> Result<(PathMargin, Option<usize>)> {
    let x = payoff.evaluate(path, qv)?;
    let seq = strategies.strategies(path, qv)?;
    if seq.is_empty() {
        return Ok((
            PathMargin { admissibility: lambda, domination: lambda - x, payoff: x, strategies: 0 },
            None,
        ));
    }
    let ss = ss_process(path, qv)?;
    let k0 = tail_start.unwrap_or(seq.len() - 1).min(seq.len() - 1);
    let mut admissibility = f64::INFINITY;
    let mut tail_min = f64::INFINITY;
    for (k, pair) in seq.iter().enumerate() {
        let w = pair.wealth(lambda, path, &ss)?;
        admissibility = admissibility.min(w.iter().copied().fold(f64::INFINITY, f64::min));
        if k >= k0 {
            tail_min = tail_min.min(w[w.len() - 1]);
        }
    }
    Ok((
        PathMargin { admissibility, domination: tail_min - x, payoff: x, strategies: seq.len() },
        Some(k0),
    ))
}

/// Checks admissibility `λ + (H^k·S)_t + (G^k·𝕊)_t ≥ 0` for all `k, t` and
/// terminal domination of `X` on every path of the ensemble. The verdict is
/// relative to the sampled paths.
pub fn verify_superhedge(
    lambda: f64,
    strategies: &dyn StrategySource,
    data: &QvEnsemble,
    payoff: &dyn Payoff,
    opts: &VerifyOptions,
) -> Result<SuperhedgeReport> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let tol = opts.tol.unwrap_or(1e-9 * (1.0 + lambda.abs()));
    let results = (0..data.len())
        .into_par_iter()
        .map(|i| verify_path(lambda, strategies, data.path(i), data.qv(i), payoff, opts.tail_start))
        .collect::<Result<Vec<_>>>()?;
    let admissibility_failures = results.iter().filter(|(m, _)| m.admissibility < -tol).count();
    let domination_failures = results.iter().filter(|(m, _)| m.domination < -tol).count();
    let worst_admissibility_margin = results.iter().map(|(m, _)| m.admissibility).fold(f64::INFINITY, f64::min);
    let worst_domination_margin = results.iter().map(|(m, _)| m.domination).fold(f64::INFINITY, f64::min);
    let truncation_index = results.iter().filter_map(|(_, k)| *k).max();
    let passed = admissibility_failures == 0 && domination_failures == 0;
    let diagnostic = if passed {
        None
    } else if results.iter().all(|(m, _)| m.strategies == 0) {
        let sup_x = results.iter().map(|(m, _)| m.payoff).fold(f64::NEG_INFINITY, f64::max);
        Some(format!("no strategies supplied and lambda {lambda} < sup X = {sup_x} on the ensemble"))
    } else {
        Some(format!(
            "{admissibility_failures} admissibility and {domination_failures} domination failures"
        ))
    };
    Ok(SuperhedgeReport {
        lambda,
        tol,
        paths: data.len(),
        admissibility_failures,
        domination_failures,
        worst_admissibility_margin,
        worst_domination_margin,
        truncation_index,
        passed,
        diagnostic,
        per_path: results.into_iter().map(|(m, _)| m).collect(),
    })
}
