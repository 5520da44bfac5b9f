//! Picard iteration for `dX = μ(t,X) dA + σ(t,X) dS` on discretized paths.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path_space::{path_rng, Grid, QvEnsemble, QvPath, SamplePath};
use crate::simple_integration::{
    coerce_at_grid, integrate_fv, integrate_simple, max_slope, FvIntegrand, OperatorPathFunctional,
    OperatorValue,
};
use crate::stats::{dist, mean, norm, norm_sq};

/// Writes `μ(t, x)` (length `d_K`) into the output buffer.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Writes `σ(t, x)` as a row-major `d_K × d_H` matrix into the output buffer.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// The finite-variation driver `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    /// `A_t = t`.
    Time,
    Zero,
}

impl Driver {
    pub fn on_grid(&self, grid: &Grid) -> Result<SamplePath> {
        let values = match self {
            Driver::Time => grid.to_vec(),
            Driver::Zero => vec![0.0; grid.len()],
        };
        SamplePath::new(grid.clone(), values, 1)
    }
}

#[derive(Clone)]
pub struct SdeSpec {
    pub x0: Vec<f64>,
    pub dim_h: usize,
    pub mu: DriftFn,
    pub sigma: DiffusionFn,
    pub lipschitz: f64,
    pub driver: Driver,
    pub c: f64,
    pub horizon: f64,
    /// Relative slack on the driver slope bound.
    pub slack: f64,
}

impl fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSpec")
            .field("x0", &self.x0)
            .field("dim_h", &self.dim_h)
            .field("lipschitz", &self.lipschitz)
            .field("driver", &self.driver)
            .field("c", &self.c)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    pub probes: usize,
    /// Largest observed `‖coef(t,k) − coef(t',k')‖ / (|t−t'| + ‖k−k'‖)`.
    pub max_ratio: f64,
}

impl SdeSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x0: Vec<f64>,
        dim_h: usize,
        mu: DriftFn,
        sigma: DiffusionFn,
        lipschitz: f64,
        driver: Driver,
        c: f64,
        horizon: f64,
    ) -> Result<Self> {
        if x0.is_empty() || dim_h == 0 {
            return Err(invalid("state dimensions must be positive"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0 must be finite"));
        }
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(invalid("Lipschitz constant must be finite and nonnegative"));
        }
        if !(c > 0.0 && horizon > 0.0) {
            return Err(invalid("c and T must be positive"));
        }
        Ok(Self { x0, dim_h, mu, sigma, lipschitz, driver, c, horizon, slack: 0.05 })
    }

    pub fn dim_k(&self) -> usize {
        self.x0.len()
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_k()];
        (self.mu)(t, x, &mut out);
        out
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> OperatorValue {
        let mut out = vec![0.0; self.dim_k() * self.dim_h];
        (self.sigma)(t, x, &mut out);
        OperatorValue::new(self.dim_k(), self.dim_h, out).expect("diffusion shape")
    }

    /// Random-pair check of the declared Lipschitz constant for `μ` and `σ`
    /// separately, with states drawn around `x0` at scale `spread`.
    pub fn probe_lipschitz(&self, probes: usize, spread: f64, seed: u64) -> Result<LipschitzProbe> {
        let mut rng = path_rng(seed, u64::MAX - 1);
        let dk = self.dim_k();
        let mut max_ratio = 0.0f64;
        for p in 0..probes {
            let local = if p % 2 == 0 { 1.0 } else { 1e-3 };
            let t = rng.random_range(0.0..=self.horizon);
            let t2 = (t + local * self.horizon * rng.random_range(-1.0..1.0)).clamp(0.0, self.horizon);
            let k: Vec<f64> = (0..dk)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.x0[j] + spread * z
                })
                .collect();
            let k2: Vec<f64> = k
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + local * spread * z
                })
                .collect();
            let denom = (t - t2).abs() + dist(&k, &k2);
            if denom == 0.0 {
                continue;
            }
            let dm = dist(&self.drift(t, &k), &self.drift(t2, &k2));
            let ds = OperatorValue::from_matrix(self.diffusion(t, &k).matrix() - self.diffusion(t2, &k2).matrix())?
                .operator_norm();
            max_ratio = max_ratio.max(dm / denom).max(ds / denom);
        }
        if max_ratio > self.lipschitz * (1.0 + 1e-9) {
            return Err(Error::LipschitzViolation { declared: self.lipschitz, observed: max_ratio });
        }
        Ok(LipschitzProbe { probes, max_ratio })
    }

    /// `g0 = sup_t ‖μ(t,x0)‖ + sup_t ‖σ(t,x0)‖` over a grid.
    pub fn g0(&self, grid: &[f64]) -> f64 {
        let sm = grid.iter().map(|&t| norm(&self.drift(t, &self.x0))).fold(0.0, f64::max);
        let ss = grid
            .iter()
            .map(|&t| self.diffusion(t, &self.x0).operator_norm())
            .fold(0.0, f64::max);
        sm + ss
    }

    fn check_driver(&self, a: &SamplePath) -> Result<()> {
        let slope = max_slope(a);
        let limit = self.c * (1.0 + self.slack);
        if slope > limit {
            return Err(Error::SlopeBound { slope, limit });
        }
        Ok(())
    }
}

/// JSON description of an SDE with built-in coefficient families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub x0: Vec<f64>,
    #[serde(default = "one")]
    pub dim_h: usize,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    #[serde(default = "time_driver")]
    pub driver: Driver,
    /// Overrides the Lipschitz constant derived from the coefficients.
    #[serde(default)]
    pub lipschitz: Option<f64>,
}

fn one() -> usize {
    1
}

fn time_driver() -> Driver {
    Driver::Time
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    /// `μ(t,x) = a + B x`.
    Affine { a: Vec<f64>, b: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionSpec {
    Zero,
    Constant { matrix: Vec<Vec<f64>> },
    /// `σ(t,x) = scale·diag(x)`; needs `d_K = d_H`.
    Linear { scale: f64 },
}

impl SdeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self, c: f64, horizon: f64) -> Result<SdeSpec> {
        let dk = self.x0.len();
        let dh = self.dim_h;
        let (mu, l_mu): (DriftFn, f64) = match &self.drift {
            DriftSpec::Zero => (Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)), 0.0),
            DriftSpec::Affine { a, b } => {
                if a.len() != dk {
                    return Err(Error::DimensionMismatch { expected: dk, got: a.len() });
                }
                let bm = OperatorValue::from_rows(b)?;
                if bm.rows() != dk || bm.cols() != dk {
                    return Err(Error::DimensionMismatch { expected: dk, got: bm.cols() });
                }
                let l = bm.operator_norm();
                let a = a.clone();
                (
                    Arc::new(move |_, x: &[f64], out: &mut [f64]| {
                        out.copy_from_slice(&a);
                        for (i, o) in out.iter_mut().enumerate() {
                            for (j, xj) in x.iter().enumerate() {
                                *o += bm.get(i, j) * xj;
                            }
                        }
                    }),
                    l,
                )
            }
        };
        let (sigma, l_sigma): (DiffusionFn, f64) = match &self.diffusion {
            DiffusionSpec::Zero => (Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)), 0.0),
            DiffusionSpec::Constant { matrix } => {
                let m = OperatorValue::from_rows(matrix)?;
                if m.rows() != dk || m.cols() != dh {
                    return Err(Error::DimensionMismatch { expected: dh, got: m.cols() });
                }
                let flat: Vec<f64> = m.to_rows().concat();
                (Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&flat)), 0.0)
            }
            DiffusionSpec::Linear { scale } => {
                if dk != dh {
                    return Err(Error::DimensionMismatch { expected: dk, got: dh });
                }
                let s = *scale;
                (
                    Arc::new(move |_, x: &[f64], out: &mut [f64]| {
                        out.fill(0.0);
                        for (i, xi) in x.iter().enumerate() {
                            out[i * x.len() + i] = s * xi;
                        }
                    }),
                    s.abs(),
                )
            }
        };
        let lipschitz = self.lipschitz.unwrap_or(l_mu.max(l_sigma));
        SdeSpec::new(self.x0.clone(), dh, mu, sigma, lipschitz, self.driver.clone(), c, horizon)
    }
}

/// `C = (2c²T + 8c)L²`.
pub fn picard_constant(c: f64, horizon: f64, lipschitz: f64) -> f64 {
    (2.0 * c * c * horizon + 8.0 * c) * lipschitz * lipschitz
}

/// `g0·(Ct)^n/n!`, computed as a running product.
pub fn picard_bound(n: u32, t: f64, g0: f64, c_picard: f64) -> f64 {
    let ct = c_picard * t;
    (1..=n).fold(g0, |acc, j| acc * ct / j as f64)
}

/// `X^{n+1} = x0 + (μ(·,X^n)·A) + (σ(·,X^n)·S)` with left-point coefficients
/// at every grid step. `X^{n+1}_0 = x0` exactly.
pub fn picard_step(spec: &SdeSpec, xn: &SamplePath, path: &SamplePath, a: &SamplePath) -> Result<SamplePath> {
    let (dk, dh) = (spec.dim_k(), spec.dim_h);
    if xn.dim() != dk {
        return Err(Error::DimensionMismatch { expected: dk, got: xn.dim() });
    }
    if path.dim() != dh {
        return Err(Error::DimensionMismatch { expected: dh, got: path.dim() });
    }
    xn.check_grid(path.times(), "iterate and path grids differ")?;
    a.check_grid(path.times(), "driver and path grids differ")?;
    let mut values = Vec::with_capacity(path.len() * dk);
    values.extend_from_slice(&spec.x0);
    let mut drift = vec![0.0; dk];
    let mut diff = vec![0.0; dk * dh];
    let mut fv = vec![0.0; dk];
    let mut mart = vec![0.0; dk];
    for i in 0..path.last_index() {
        let t = path.time(i);
        let x = xn.value(i);
        (spec.mu)(t, x, &mut drift);
        (spec.sigma)(t, x, &mut diff);
        let da = a.scalar_at(i + 1) - a.scalar_at(i);
        let (s0, s1) = (path.value(i), path.value(i + 1));
        for k in 0..dk {
            fv[k] += drift[k] * da;
            let row = &diff[k * dh..(k + 1) * dh];
            mart[k] += row.iter().zip(s0.iter().zip(s1)).map(|(r, (p, q))| r * (q - p)).sum::<f64>();
        }
        values.extend((0..dk).map(|k| spec.x0[k] + fv[k] + mart[k]));
    }
    path.with_values(values, dk)
}

/// The same step routed through grid-resolution coercion and the generic
/// integrators.
pub fn picard_step_reference(spec: &SdeSpec, xn: &SamplePath, path: &SamplePath, a: &SamplePath) -> Result<SamplePath> {
    let (dk, dh) = (spec.dim_k(), spec.dim_h);
    let xn_mu = xn.clone();
    let spec_mu = spec.clone();
    let mu = OperatorPathFunctional::new(dk, 1, "drift", move |v| {
        OperatorValue::column(&spec_mu.drift(v.time(), xn_mu.value(v.index())))
    });
    let xn_sigma = xn.clone();
    let spec_sigma = spec.clone();
    let sigma = OperatorPathFunctional::new(dk, dh, "diffusion", move |v| {
        spec_sigma.diffusion(v.time(), xn_sigma.value(v.index()))
    });
    let fv = integrate_fv(FvIntegrand::Simple(&coerce_at_grid(&mu, a)?), a, spec.c, spec.slack)?;
    let mart = integrate_simple(&coerce_at_grid(&sigma, path)?, path)?;
    let values = (0..path.len())
        .flat_map(|i| (0..dk).map(move |k| (i, k)))
        .map(|(i, k)| spec.x0[k] + fv.value(i)[k] + mart.value(i)[k])
        .collect();
    path.with_values(values, dk)
}

fn sup_sq_distance(a: &SamplePath, b: &SamplePath) -> f64 {
    (0..a.len())
        .map(|i| {
            let d = dist(a.value(i), b.value(i));
            d * d
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessCheck {
    pub perturbation: f64,
    pub mean_sup_distance: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub iterations: usize,
    pub converged: bool,
    /// `g^n`, the ensemble mean of `sup_t ‖X^n − X^{n−1}‖²`, for `n = 1, 2, …`.
    pub g: Vec<f64>,
    /// `g^n / g^{n−1}`.
    pub ratios: Vec<f64>,
    /// `g0·(CT)^n/n!` for the same `n`.
    pub envelope: Vec<f64>,
    pub g0: f64,
    pub picard_constant: f64,
    /// `max_n g^n / envelope_n`.
    pub kappa: f64,
    pub tol: f64,
    pub uniqueness: Option<UniquenessCheck>,
}

#[derive(Debug, Clone)]
pub struct SdeSolution {
    pub paths: Vec<SamplePath>,
    pub report: PicardReport,
}

fn iterate(
    spec: &SdeSpec,
    data: &QvEnsemble,
    drivers: &[SamplePath],
    start: &[f64],
    tol: f64,
    n_max: usize,
) -> Result<(Vec<SamplePath>, Vec<f64>, bool)> {
    let mut xs: Vec<SamplePath> = (0..data.len())
        .map(|i| SamplePath::constant(data.path(i).times().clone(), start))
        .collect::<Result<_>>()?;
    let mut g = Vec::new();
    let mut converged = false;
    for _ in 0..n_max {
        let next = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let x = picard_step(spec, &xs[i], data.path(i), &drivers[i])?;
                let d = sup_sq_distance(&x, &xs[i]);
                Ok((x, d))
            })
            .collect::<Result<Vec<_>>>()?;
        let (paths, dists): (Vec<_>, Vec<_>) = next.into_iter().unzip();
        xs = paths;
        let gn = mean(&dists);
        g.push(gn);
        if gn < tol * tol {
            converged = true;
            break;
        }
    }
    Ok((xs, g, converged))
}

/// Picard iteration from `X^0 ≡ x0` on every path until the ensemble mean of
/// `sup_t ‖X^{n+1} − X^n‖²` drops below `tol²`, plus a rerun from
/// `x0 + 0.1·(1,…,1)` to check that both runs reach the same limit.
pub fn solve_sde(spec: &SdeSpec, data: &QvEnsemble, tol: f64, n_max: usize) -> Result<SdeSolution> {
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    if data.is_empty() {
        return Err(invalid("ensemble is empty"));
    }
    let drivers = (0..data.len())
        .map(|i| {
            let a = spec.driver.on_grid(data.path(i).times())?;
            spec.check_driver(&a)?;
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    let (paths, g, converged) = iterate(spec, data, &drivers, &spec.x0, tol, n_max)?;

    let grid = data.path(0).times();
    let g0 = spec.g0(grid);
    let c_picard = picard_constant(spec.c, spec.horizon, spec.lipschitz);
    let envelope: Vec<f64> = (1..=g.len())
        .map(|n| picard_bound(n as u32, spec.horizon, g0, c_picard))
        .collect();
    let kappa = g
        .iter()
        .zip(&envelope)
        .map(|(a, b)| if *b > 0.0 { a / b } else if *a > 0.0 { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    let ratios = g.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();

    let perturbation = 0.1;
    let shifted: Vec<f64> = spec.x0.iter().map(|x| x + perturbation).collect();
    let (other, _, other_converged) = iterate(spec, data, &drivers, &shifted, tol, n_max)?;
    let dists: Vec<f64> = paths
        .iter()
        .zip(&other)
        .map(|(a, b)| sup_sq_distance(a, b).sqrt())
        .collect();
    let mean_sup_distance = mean(&dists);
    let threshold = 10.0 * tol;
    let uniqueness = UniquenessCheck {
        perturbation,
        mean_sup_distance,
        threshold,
        passed: other_converged && mean_sup_distance < threshold,
    };

    Ok(SdeSolution {
        paths,
        report: PicardReport {
            iterations: g.len(),
            converged,
            g,
            ratios,
            envelope,
            g0,
            picard_constant: c_picard,
            kappa,
            tol,
            uniqueness: Some(uniqueness),
        },
    })
}

/// `x0·exp(σ0(ω_t − ω_0) − σ0²⟨ω⟩_t/2)`.
pub fn gbm_closed_form(x0: f64, sigma0: f64, path: &SamplePath, qv: &QvPath) -> Result<SamplePath> {
    if path.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: path.dim() });
    }
    path.check_grid(qv.times(), "path and qv grids differ")?;
    let w0 = path.scalar_at(0);
    let values = (0..path.len())
        .map(|i| x0 * (sigma0 * (path.scalar_at(i) - w0) - 0.5 * sigma0 * sigma0 * qv.at(i)).exp())
        .collect();
    path.with_values(values, 1)
}

/// `sup_t ‖a_t − b_t‖`.
pub fn sup_distance(a: &SamplePath, b: &SamplePath) -> f64 {
    sup_sq_distance(a, b).sqrt()
}

/// `sup_t ‖X_t‖²`, used by reports.
pub fn sup_norm_sq(x: &SamplePath) -> f64 {
    (0..x.len()).map(|i| norm_sq(x.value(i))).fold(0.0, f64::max)
}
