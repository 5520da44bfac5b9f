//! Python bindings for `pathwise_core`.
//!
//! ```python
//! import pathwise
//! data = pathwise.Ensemble.sample("bm(1)", steps=1024, paths=100, seed=7)
//! data.qv_terminal()
//! pathwise.certify_sup_integral_sq(data, level=4)
//! ```

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pathwise_core::hedging::{self, PayoffSpec, VerifyOptions};
use pathwise_core::outer_measure::{self, HedgingCertificate};
use pathwise_core::path_space::{self as ps, MeasureTag, PathEnsemble, PredictionSetSpec, QvEnsemble, QvOptions};
use pathwise_core::sde::{self, SdeConfig};
use pathwise_core::simple_integration::{self as si, IntegrandSpec};

fn err(e: pathwise_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A path on a time grid; values are stored row-major, one row per time.
#[pyclass(name = "SamplePath", module = "pathwise", frozen, from_py_object)]
#[derive(Clone)]
struct PySamplePath {
    inner: ps::SamplePath,
}

#[pymethods]
impl PySamplePath {
    #[new]
    #[pyo3(signature = (times, values, dim=1))]
    fn new(times: Vec<f64>, values: Vec<f64>, dim: usize) -> PyResult<Self> {
        Ok(Self { inner: ps::SamplePath::new(times, values, dim).map_err(err)? })
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn value(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.value(i).to_vec())
    }

    /// Returns `(qv, level, converged)`.
    #[pyo3(signature = (tol=0.05))]
    fn quadratic_variation(&self, tol: f64) -> PyResult<(Vec<f64>, u32, bool)> {
        let opts = QvOptions { tol, ..QvOptions::default() };
        let est = ps::quadratic_variation(&self.inner, &opts).map_err(err)?;
        Ok((est.qv.values().to_vec(), est.level, est.converged))
    }

    fn crossing_partition(&self, level: u32) -> Vec<usize> {
        ps::crossing_partition(&self.inner, level).stop_indices
    }

    /// `(F·S)` for a scalar piecewise-constant integrand with the given stop indices.
    fn integrate(&self, stops: Vec<usize>, coeffs: Vec<f64>) -> PyResult<PySamplePath> {
        let f = si::SimpleIntegrand::scalar_pieces(stops, &coeffs).map_err(err)?;
        let inner = si::integrate_simple(&f, &self.inner).map_err(err)?;
        Ok(PySamplePath { inner })
    }

    fn __repr__(&self) -> String {
        format!("SamplePath(len={}, dim={}, T={})", self.inner.len(), self.inner.dim(), self.inner.horizon())
    }
}

/// Sampled paths together with their quadratic variation estimates.
#[pyclass(name = "Ensemble", module = "pathwise", frozen)]
struct PyEnsemble {
    inner: QvEnsemble,
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (measure, steps, paths, seed, horizon=1.0, dim=1, c=None))]
    fn sample(
        py: Python<'_>,
        measure: &str,
        steps: usize,
        paths: usize,
        seed: u64,
        horizon: f64,
        dim: usize,
        c: Option<f64>,
    ) -> PyResult<Self> {
        let tag: MeasureTag = measure.parse().map_err(err)?;
        let inner = py
            .detach(|| {
                let grid = ps::uniform_grid(steps, horizon)?;
                let spec = c.map(|c| PredictionSetSpec::new(c, horizon, dim)).transpose()?;
                let ens = ps::sample_ensemble(&tag, &grid, dim, paths, seed, spec.as_ref())?;
                QvEnsemble::analyze(ens, &QvOptions::default())
            })
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_paths(paths: Vec<PySamplePath>) -> PyResult<Self> {
        let ens = PathEnsemble::deterministic(paths.into_iter().map(|p| p.inner).collect(), "python").map_err(err)?;
        Ok(Self { inner: QvEnsemble::analyze(ens, &QvOptions::default()).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn path(&self, i: usize) -> PyResult<PySamplePath> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(PySamplePath { inner: self.inner.path(i).clone() })
    }

    fn qv_terminal(&self) -> Vec<f64> {
        self.inner.estimates.iter().map(|e| e.qv.terminal()).collect()
    }

    fn converged_fraction(&self) -> f64 {
        self.inner.converged_fraction()
    }

    #[getter]
    fn descriptor(&self) -> String {
        self.inner.ensemble.descriptor()
    }
}

/// Both sides `(lhs, rhs)` of the pathwise Doob/BDG inequality.
#[pyfunction]
fn pathwise_bdg_check(x: Vec<f64>) -> PyResult<(f64, f64)> {
    let s = hedging::pathwise_bdg_check(&x).map_err(err)?;
    Ok((s.lhs, s.rhs))
}

#[pyfunction]
fn picard_constant(c: f64, horizon: f64, lipschitz: f64) -> f64 {
    sde::picard_constant(c, horizon, lipschitz)
}

#[pyfunction]
fn picard_bound(n: u32, t: f64, g0: f64, c_picard: f64) -> f64 {
    sde::picard_bound(n, t, g0, c_picard)
}

/// `x0·exp(σ0(ω_t − ω_0) − σ0²⟨ω⟩_t/2)` with the supplied QV values.
#[pyfunction]
fn gbm_closed_form(x0: f64, sigma0: f64, path: &PySamplePath, qv: Vec<f64>) -> PyResult<PySamplePath> {
    let qv = ps::QvPath::new(path.inner.times().clone(), qv, 0).map_err(err)?;
    let inner = sde::gbm_closed_form(x0, sigma0, &path.inner, &qv).map_err(err)?;
    Ok(PySamplePath { inner })
}

fn integrand(json: Option<&str>) -> PyResult<IntegrandSpec> {
    match json {
        None => Ok(IntegrandSpec::unit()),
        Some(text) => IntegrandSpec::from_json(text).map_err(err),
    }
}

/// BDG certificate for `sup_t (F·S)_t²`; `F` defaults to the identity.
#[pyfunction]
#[pyo3(signature = (data, level=4, integrand=None))]
fn certify_sup_integral_sq<'py>(
    py: Python<'py>,
    data: &PyEnsemble,
    level: u32,
    integrand: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = self::integrand(integrand)?;
    let (cert, report) = py
        .detach(|| outer_measure::certify_sup_integral_sq(&spec, &data.inner, level))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("lambda", cert.lambda)?;
    d.set_item("passed", report.passed)?;
    d.set_item("admissibility_failures", report.admissibility_failures)?;
    d.set_item("domination_failures", report.domination_failures)?;
    d.set_item("certificate", cert.to_json().map_err(err)?)?;
    Ok(d)
}

/// Monte-Carlo lower bound and cash upper bound `c·T` for `⟨S⟩_T`.
#[pyfunction]
fn qv_duality<'py>(py: Python<'py>, data: &PyEnsemble, upper: f64) -> PyResult<Bound<'py, PyDict>> {
    let mut cert = HedgingCertificate::cash(upper, PayoffSpec::TerminalQv).map_err(err)?;
    let report = cert.verify_and_record(&data.inner, &VerifyOptions::default()).map_err(err)?;
    let b = outer_measure::duality_gap(&PayoffSpec::TerminalQv, &cert, std::slice::from_ref(&data.inner)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("lower", b.lower)?;
    d.set_item("se", b.se)?;
    d.set_item("upper", b.upper)?;
    d.set_item("gap", b.relative_gap)?;
    d.set_item("inconsistent", b.inconsistent)?;
    d.set_item("verified", report.passed)?;
    Ok(d)
}

/// Picard iteration for an SDE given as JSON; returns `(paths, g)`.
#[pyfunction]
#[pyo3(signature = (spec_json, data, tol=1e-4, n_max=30, c=1.0))]
fn solve_sde(
    py: Python<'_>,
    spec_json: &str,
    data: &PyEnsemble,
    tol: f64,
    n_max: usize,
    c: f64,
) -> PyResult<(Vec<PySamplePath>, Vec<f64>)> {
    let config = SdeConfig::from_json(spec_json).map_err(err)?;
    let horizon = data.inner.ensemble.grid().last().copied().unwrap_or(1.0);
    let sol = py
        .detach(|| {
            let spec = config.build(c, horizon)?;
            sde::solve_sde(&spec, &data.inner, tol, n_max)
        })
        .map_err(err)?;
    let paths = sol.paths.into_iter().map(|inner| PySamplePath { inner }).collect();
    Ok((paths, sol.report.g))
}

#[pymodule]
fn pathwise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySamplePath>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(pathwise_bdg_check, m)?)?;
    m.add_function(wrap_pyfunction!(picard_constant, m)?)?;
    m.add_function(wrap_pyfunction!(picard_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gbm_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(certify_sup_integral_sq, m)?)?;
    m.add_function(wrap_pyfunction!(qv_duality, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sde, m)?)?;
    Ok(())
}
