//! Randomized property suites behind the `bdg` and `selftest` experiments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hedging::{ito_decomposition, pathwise_bdg_check};
use crate::outer_measure::certify_sup_integral_sq;
use crate::path_space::{path_rng, uniform_grid, QvEnsemble, QvPath, SamplePath};
use crate::simple_integration::{IntegrandSpec, OperatorValue, SimpleIntegrand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub cases: usize,
    pub violations: usize,
    /// Smallest margin observed (negative means a violation before tolerance).
    pub worst_margin: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `cases` Gaussian sequences of length `1..=max_len` through the pathwise
/// Doob/BDG inequality, tolerance `1e-9·max(1, |rhs|)`.
pub fn bdg_inequality_suite(cases: usize, max_len: usize, seed: u64) -> CheckSummary {
    let margins: Vec<(bool, f64)> = (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let len = rng.random_range(1..=max_len);
            let x: Vec<f64> = (0..len).map(|_| gaussian(&mut rng)).collect();
            let s = pathwise_bdg_check(&x).expect("finite nonempty input");
            (s.holds(1e-9), s.rhs - s.lhs)
        })
        .collect();
    CheckSummary {
        name: "pathwise_bdg".into(),
        cases,
        violations: margins.iter().filter(|m| !m.0).count(),
        worst_margin: margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min),
    }
}

/// A Brownian-like path with `steps` steps in dimension `dim`.
pub fn random_path(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> SamplePath {
    let grid = uniform_grid(steps, 1.0).expect("steps ≥ 1");
    let sd = (1.0 / steps as f64).sqrt();
    let mut values = Vec::with_capacity((steps + 1) * dim);
    let mut state: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    values.extend_from_slice(&state);
    for _ in 0..steps {
        for x in state.iter_mut() {
            *x += sd * gaussian(rng);
        }
        values.extend_from_slice(&state);
    }
    SamplePath::new(grid, values, dim).expect("finite values")
}

/// A simple integrand with random stops and Gaussian coefficient matrices.
pub fn random_integrand(rng: &mut ChaCha8Rng, last: usize, rows: usize, cols: usize) -> SimpleIntegrand {
    let mut stops: Vec<usize> = (0..rng.random_range(0..=last.min(8)))
        .map(|_| rng.random_range(0..=last))
        .collect();
    stops.push(0);
    stops.push(last);
    stops.sort_unstable();
    stops.dedup();
    let coeffs = (1..stops.len())
        .map(|_| {
            let entries = (0..rows * cols).map(|_| gaussian(rng)).collect();
            OperatorValue::new(rows, cols, entries).expect("finite entries")
        })
        .collect();
    SimpleIntegrand::new(stops, coeffs).expect("valid stops")
}

/// A nondecreasing QV path with random increments; the Itô identity does
/// not depend on which QV is used.
pub fn random_qv(rng: &mut ChaCha8Rng, path: &SamplePath) -> QvPath {
    let mut acc = 0.0;
    let mut qv = vec![0.0];
    for _ in 0..path.last_index() {
        acc += rng.random_range(0.0..0.1);
        qv.push(acc);
    }
    QvPath::new(path.times().clone(), qv, 0).expect("valid qv")
}

/// Scalar cases: residual zero at stop times to `1e-10` relative.
/// Matrix cases: residual `≥ −1e-10·scale` everywhere.
pub fn ito_residual_suite(cases: usize, matrix: bool, seed: u64) -> CheckSummary {
    let margins: Vec<(bool, f64)> = (0..cases)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let steps = rng.random_range(1..=64);
            let (dh, dk) = if matrix {
                (rng.random_range(1..=4), rng.random_range(1..=4))
            } else {
                (1, 1)
            };
            let path = random_path(&mut rng, steps, dh);
            let f = random_integrand(&mut rng, steps, dk, dh);
            let qv = random_qv(&mut rng, &path);
            let d = ito_decomposition(&f, &path, &qv).expect("consistent shapes");
            let r = d.residual();
            let scale = d.scale().max(1.0);
            if matrix {
                let worst = r.iter().copied().fold(f64::INFINITY, f64::min) / scale;
                (worst >= -1e-10, worst)
            } else {
                let worst = f.stops().iter().map(|&s| r[s].abs()).fold(0.0, f64::max) / scale;
                (worst <= 1e-10, -worst)
            }
        })
        .collect();
    CheckSummary {
        name: if matrix { "ito_residual_matrix".into() } else { "ito_residual_scalar".into() },
        cases,
        violations: margins.iter().filter(|m| !m.0).count(),
        worst_margin: margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min),
    }
}

/// The BDG certificate for `F ≡ 1` verified on the ensemble.
pub fn certificate_suite(data: &QvEnsemble, level: u32) -> Result<CheckSummary> {
    let (_, report) = certify_sup_integral_sq(&IntegrandSpec::unit(), data, level)?;
    Ok(CheckSummary {
        name: "bdg_certificate".into(),
        cases: report.paths,
        violations: report.admissibility_failures + report.domination_failures,
        worst_margin: report.worst_admissibility_margin.min(report.worst_domination_margin),
    })
}

/// Ensemble mean of `(F·S)_T² − (‖F‖²·⟨S⟩)_T`, and its standard error.
pub fn ito_isometry_gap(f: &IntegrandSpec, data: &QvEnsemble) -> Result<(f64, f64)> {
    let diffs = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let path = data.path(i);
            let simple = f.resolve(path)?;
            let x = crate::simple_integration::integrate_simple(&simple, path)?;
            let last = path.last_index();
            let lhs = crate::stats::norm_sq(x.value(last));
            let rhs = crate::simple_integration::norm_sq_against_qv(&simple, data.qv(i))?.scalar_at(last);
            Ok(lhs - rhs)
        })
        .collect::<Result<Vec<f64>>>()?;
    let est = crate::stats::MeanEstimate::from_samples(&diffs);
    Ok((est.mean, est.se))
}

/// Sum of `violations` over summaries.
pub fn total_violations(summaries: &[CheckSummary]) -> usize {
    summaries.iter().map(|s| s.violations).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(bdg_inequality_suite(2000, 64, 1).passed());
        assert!(ito_residual_suite(200, false, 2).passed());
        assert!(ito_residual_suite(200, true, 3).passed());
    }
}
