//! Integrals of non-simple integrands as limits of deterministic-stop
//! approximations, Lipschitz composition, Cauchy subsequences and the Riesz
//! identification `K ≅ L(K, ℝ)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path_space::{
    check_xi_c, path_rng, PredictionSetSpec, QvEnsemble, QvPath, SamplePath, Verdict, XiCheckOptions,
};
use crate::simple_integration::{
    coerce_to_simple, integrate_simple, OperatorPathFunctional, OperatorValue, SimpleIntegrand,
};
use crate::stats::dist;

/// Dyadic piece counts `1, 2, 4, …` up to a quarter of the grid steps.
pub fn default_schedule(grid_steps: usize) -> Vec<usize> {
    let cap = (grid_steps / 4).max(1);
    std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|&n| n <= cap)
        .collect()
}

fn check_schedule(schedule: &[usize], steps: usize) -> Result<()> {
    if schedule.is_empty() {
        return Err(invalid("schedule must be nonempty"));
    }
    if schedule[0] == 0 || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("schedule must be strictly increasing piece counts ≥ 1"));
    }
    let last = schedule[schedule.len() - 1];
    if last > steps {
        return Err(invalid(format!("schedule entry {last} exceeds the {steps} grid steps")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitIntegral {
    /// `(F^{N_J}·S)` on the finest schedule level.
    pub integral: SamplePath,
    /// Bound on the distance to the limit; infinite without two levels.
    pub error_estimate: f64,
    /// Norm of `F^{N_j} − F^{N_{j−1}}` for `j = 1..J`.
    pub differences: Vec<f64>,
    /// Successive differences failed to decrease.
    pub non_cauchy: bool,
    /// Advisory membership of the integrating path in `Ξ_c`.
    pub xi_verdict: Option<Verdict>,
}

fn step_difference_sq(a: &SimpleIntegrand, b: &SimpleIntegrand) -> Vec<f64> {
    let (pa, pb) = (a.step_pieces(), b.step_pieces());
    pa.iter()
        .zip(&pb)
        .map(|(&i, &j)| {
            let d = OperatorValue::from_matrix(a.coeff(i).matrix() - b.coeff(j).matrix())
                .expect("difference of finite operators");
            d.operator_norm_sq()
        })
        .collect()
}

fn non_increasing(d: &[f64]) -> bool {
    d.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-300)
}

/// `(F^{N}·S)` along the schedule with error `2√c·‖F^{N_J} − F^{N_{J−1}}‖`,
/// the norm being `(Σ_i Δt_i ‖ΔF_{t_i}‖²)^{1/2}` on this path.
pub fn integrate_h2(
    f: &OperatorPathFunctional,
    path: &SamplePath,
    qv: &QvPath,
    c: f64,
    schedule: &[usize],
) -> Result<LimitIntegral> {
    if !(c > 0.0) {
        return Err(invalid("c must be positive"));
    }
    check_schedule(schedule, path.last_index())?;
    let levels = schedule
        .iter()
        .map(|&n| coerce_to_simple(f, path, n).map(|x| x.0))
        .collect::<Result<Vec<_>>>()?;
    let differences: Vec<f64> = levels
        .windows(2)
        .map(|w| {
            step_difference_sq(&w[1], &w[0])
                .iter()
                .enumerate()
                .map(|(i, d)| d * (path.time(i + 1) - path.time(i)))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let spec = PredictionSetSpec::new(c, path.horizon(), path.dim())?;
    let verdict = check_xi_c(path, qv, &spec, &XiCheckOptions::default())?.verdict;
    let finest = levels.last().expect("nonempty schedule");
    Ok(LimitIntegral {
        integral: integrate_simple(finest, path)?,
        error_estimate: differences.last().map_or(f64::INFINITY, |d| 2.0 * c.sqrt() * d),
        non_cauchy: !non_increasing(&differences),
        differences,
        xi_verdict: Some(verdict),
    })
}

/// As [`integrate_h2`] with error `2‖F^{N_J} − F^{N_{J−1}}‖_{𝓗^∞}` taken over
/// the ensemble.
pub fn integrate_hinf(
    f: &OperatorPathFunctional,
    path: &SamplePath,
    data: &QvEnsemble,
    schedule: &[usize],
) -> Result<LimitIntegral> {
    check_schedule(schedule, path.last_index())?;
    let finest = coerce_to_simple(f, path, schedule[schedule.len() - 1])?.0;
    let per_path = (0..data.len())
        .into_par_iter()
        .map(|p| {
            let (omega, qv) = (data.path(p), data.qv(p));
            check_schedule(schedule, omega.last_index())?;
            let levels = schedule
                .iter()
                .map(|&n| coerce_to_simple(f, omega, n).map(|x| x.0))
                .collect::<Result<Vec<_>>>()?;
            Ok(levels
                .windows(2)
                .map(|w| {
                    step_difference_sq(&w[1], &w[0])
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * (qv.at(i + 1) - qv.at(i)))
                        .sum::<f64>()
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let differences: Vec<f64> = (0..schedule.len() - 1)
        .map(|j| per_path.iter().map(|d| d[j]).fold(0.0, f64::max).sqrt())
        .collect();
    Ok(LimitIntegral {
        integral: integrate_simple(&finest, path)?,
        error_estimate: differences.last().map_or(f64::INFINITY, |d| 2.0 * d),
        non_cauchy: !non_increasing(&differences),
        differences,
        xi_verdict: None,
    })
}

pub type LipschitzMap = Arc<dyn Fn(f64, &[f64]) -> OperatorValue + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probes: usize,
    pub max_ratio: f64,
}

/// `(t, ω) ↦ f(t, Y_t)` after probing `‖f(t,k) − f(t',k')‖ ≤ L_f(|t−t'| + ‖k−k'‖)`
/// on random pairs around the range of `Y`.
pub fn compose_lipschitz(
    f: LipschitzMap,
    lipschitz: f64,
    y: &SamplePath,
    probes: usize,
    seed: u64,
) -> Result<(OperatorPathFunctional, ProbeReport)> {
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(invalid("declared Lipschitz constant must be positive"));
    }
    let mut rng = path_rng(seed, u64::MAX);
    let horizon = y.horizon();
    let mut max_ratio = 0.0f64;
    for p in 0..probes {
        let i = rng.random_range(0..y.len());
        let t = rng.random_range(0.0..=horizon);
        let k: Vec<f64> = y.value(i).to_vec();
        let scale = if p % 2 == 0 { 1.0 } else { 1e-3 };
        let t2 = (t + scale * horizon * rng.random_range(-1.0..1.0)).clamp(0.0, horizon);
        let k2: Vec<f64> = k
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + scale * z
            })
            .collect();
        let denom = (t - t2).abs() + dist(&k, &k2);
        if denom == 0.0 {
            continue;
        }
        let a = f(t, &k);
        let b = f(t2, &k2);
        let d = OperatorValue::from_matrix(a.matrix() - b.matrix())
            .map_err(|_| invalid("coefficient map returned non-finite values"))?;
        max_ratio = max_ratio.max(d.operator_norm() / denom);
    }
    if max_ratio > lipschitz * (1.0 + 1e-9) {
        return Err(Error::LipschitzViolation { declared: lipschitz, observed: max_ratio });
    }
    let shape = f(0.0, y.value(0));
    let y = y.clone();
    let functional = OperatorPathFunctional::new(shape.rows(), shape.cols(), "lipschitz_composition", move |v| {
        f(v.time(), y.value(v.index()))
    });
    Ok((functional, ProbeReport { probes, max_ratio }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyLimit {
    pub limit: SamplePath,
    pub indices: Vec<usize>,
    /// `Σ_{l ≥ K} 2^{-l}` for `K` selected links, 0 if the last link has bound 0.
    pub accuracy: f64,
}

/// Picks `n_0 < n_1 < …` with `b(n_k, n_{k+1}) ≤ 2^{-k}` and returns the last
/// selected element as the representative of the limit.
pub fn cauchy_limit(seq: &[SamplePath], bound: &dyn Fn(usize, usize) -> f64) -> Result<CauchyLimit> {
    if seq.is_empty() {
        return Err(invalid("empty sequence"));
    }
    for n in 1..seq.len().saturating_sub(1) {
        if bound(n, n + 1) > bound(n - 1, n) * (1.0 + 1e-12) {
            return Err(Error::NotCauchy(format!("bound increases at index {n}")));
        }
    }
    let mut indices = vec![0usize];
    let mut last_bound = f64::INFINITY;
    let mut k = 0i32;
    'outer: loop {
        let cur = *indices.last().unwrap();
        for n in cur + 1..seq.len() {
            let b = bound(cur, n);
            if b <= 2f64.powi(-k) {
                indices.push(n);
                last_bound = b;
                k += 1;
                continue 'outer;
            }
        }
        break;
    }
    if seq.len() > 1 && indices.len() == 1 {
        return Err(Error::NotCauchy("no admissible subsequence".into()));
    }
    let accuracy = if last_bound == 0.0 { 0.0 } else { 2f64.powi(1 - k) };
    Ok(CauchyLimit { limit: seq[*indices.last().unwrap()].clone(), indices, accuracy })
}

/// Sup-norm distances between sequence elements, usable as `bound`.
pub fn sup_distance(seq: &[SamplePath], n: usize, m: usize) -> f64 {
    let (a, b) = (&seq[n], &seq[m]);
    (0..a.len()).map(|i| dist(a.value(i), b.value(i))).fold(0.0, f64::max)
}

/// `Y_t ↦ ⟨Y_t, ·⟩`, a `1×d_K` row valued functional.
pub fn riesz_identify(y: &SamplePath) -> OperatorPathFunctional {
    let y = y.clone();
    OperatorPathFunctional::new(1, y.dim(), "riesz", move |v| OperatorValue::row(y.value(v.index())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_space::uniform_grid;
    use crate::simple_integration::IntegrandSpec;

    #[test]
    fn schedule_defaults() {
        assert_eq!(default_schedule(64), vec![1, 2, 4, 8, 16]);
        assert_eq!(default_schedule(2), vec![1]);
    }

    #[test]
    fn simple_integrand_is_reproduced() {
        let path = SamplePath::scalar(vec![0.0, 0.25, 0.5, 0.75, 1.0], vec![0.0, 0.4, 1.0, 0.2, -0.5]).unwrap();
        let qv = QvPath::zero(&path);
        let spec = IntegrandSpec::Deterministic {
            stops: vec![0.0, 0.5, 1.0],
            coeffs: vec![vec![vec![2.0]], vec![vec![-1.0]]],
        };
        let f = spec.to_functional(1).unwrap();
        let out = integrate_h2(&f, &path, &qv, 1.0, &[2, 4]).unwrap();
        let direct = integrate_simple(&spec.resolve(&path).unwrap(), &path).unwrap();
        assert_eq!(out.integral, direct);
        assert_eq!(out.error_estimate, 0.0);
    }

    #[test]
    fn schedule_beyond_grid_is_rejected() {
        let path = SamplePath::scalar(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 0.0]).unwrap();
        let f = OperatorPathFunctional::constant(OperatorValue::scalar(1.0));
        assert!(integrate_h2(&f, &path, &QvPath::zero(&path), 1.0, &[1, 4]).is_err());
        assert!(integrate_h2(&f, &path, &QvPath::zero(&path), 1.0, &[]).is_err());
    }

    #[test]
    fn smooth_path_riemann_oracle() {
        let grid = uniform_grid(4096, 1.0).unwrap();
        let path = SamplePath::from_fn(grid, 1, |t| vec![t]).unwrap();
        let qv = QvPath::zero(&path);
        let f = IntegrandSpec::TimeLinear { matrix: vec![vec![1.0]] }.to_functional(1).unwrap();
        let coarse = integrate_h2(&f, &path, &qv, 1.0, &[4, 8]).unwrap();
        let fine = integrate_h2(&f, &path, &qv, 1.0, &[512, 1024]).unwrap();
        let err = |r: &LimitIntegral| (r.integral.scalar_at(4096) - 0.5).abs();
        assert!(err(&fine) < err(&coarse));
        assert!(err(&fine) < 1e-3);
        assert!(!fine.non_cauchy);
    }

    #[test]
    fn riesz_examples() {
        let grid = uniform_grid(3, 1.0).unwrap();
        let y = SamplePath::constant(grid, &[3.0, 4.0]).unwrap();
        let r = riesz_identify(&y);
        let v = r.eval(&y.view(2)).unwrap();
        assert_eq!(v.operator_norm(), 5.0);
        assert_eq!(v.apply(y.value(2)), vec![25.0]);
    }

    #[test]
    fn sine_composition_passes_probes() {
        let grid = uniform_grid(16, 1.0).unwrap();
        let y = SamplePath::from_fn(grid, 1, |t| vec![3.0 * t]).unwrap();
        let f: LipschitzMap = Arc::new(|_, k| OperatorValue::scalar(k[0].sin()));
        let (g, report) = compose_lipschitz(f, 1.0, &y, 500, 3).unwrap();
        assert!(report.max_ratio <= 1.0);
        assert!((g.eval(&y.view(8)).unwrap().get(0, 0) - 1.5f64.sin()).abs() < 1e-15);
        let steep: LipschitzMap = Arc::new(|_, k| OperatorValue::scalar(5.0 * k[0]));
        assert!(matches!(
            compose_lipschitz(steep, 1.0, &y, 100, 3),
            Err(Error::LipschitzViolation { .. })
        ));
    }

    #[test]
    fn cauchy_examples() {
        let grid = uniform_grid(2, 1.0).unwrap();
        let p = SamplePath::constant(grid.clone(), &[1.0]).unwrap();
        let constant = vec![p.clone(); 4];
        let out = cauchy_limit(&constant, &|n, m| sup_distance(&constant, n, m)).unwrap();
        assert_eq!(out.accuracy, 0.0);
        assert_eq!(out.limit, p);

        let geometric: Vec<SamplePath> = (0..8)
            .map(|n| {
                let x: f64 = (0..n).map(|j| 3f64.powi(-j)).sum();
                SamplePath::constant(grid.clone(), &[x]).unwrap()
            })
            .collect();
        let b = |n: usize, m: usize| -> f64 { (n..m).map(|j| 3f64.powi(-(j as i32))).sum() };
        let out = cauchy_limit(&geometric, &b).unwrap();
        assert_eq!(out.indices, (0..8).collect::<Vec<_>>());
        assert!(out.accuracy <= 2f64.powi(1 - 7));

        let two = vec![p.clone(), p];
        assert!(matches!(cauchy_limit(&two, &|_, _| 5.0), Err(Error::NotCauchy(_))));
    }
}
