//! Python bindings: measures, the dual and exact solvers, spread profiles,
//! surrogates and the bound checkers.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qotlab::experiment::{sweep, ExperimentConfig};
use qotlab::verify::{prepare, BoundId, Instance};
use qotlab::{self as core, Error, GeneratorSpec, InstanceSource};

fn to_py(err: Error) -> PyErr {
    if err.is_convergence() {
        PyRuntimeError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "DiscreteMeasure", module = "qotlab", from_py_object)]
#[derive(Clone)]
struct PyMeasure {
    inner: core::DiscreteMeasure,
}

#[pymethods]
impl PyMeasure {
    #[new]
    fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        let inner = core::DiscreteMeasure::new(&atoms, &weights).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Equal-weight lattice `hZ^d` inside the unit ball.
    #[staticmethod]
    fn grid(dim: usize, spacing: f64) -> PyResult<Self> {
        let inner = core::uniform_ball_grid(dim, spacing).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn dirac(point: Vec<f64>) -> PyResult<Self> {
        let inner = core::DiscreteMeasure::dirac(&point).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = core::DiscreteMeasure::from_json(text).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn atoms(&self) -> Vec<Vec<f64>> {
        self.inner.atom_vecs()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DiscreteMeasure(dim={}, atoms={})", self.inner.dim(), self.inner.len())
    }
}

#[pyclass(name = "MongeMap", module = "qotlab", from_py_object)]
#[derive(Clone)]
struct PyMongeMap {
    inner: core::MongeMapSpec,
}

#[pymethods]
impl PyMongeMap {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self {
            inner: core::MongeMapSpec::identity(dim),
        }
    }

    /// `x ↦ a x`.
    #[staticmethod]
    fn scaling(dim: usize, a: f64) -> PyResult<Self> {
        let inner = core::MongeMapSpec::scaling(dim, a).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// `x ↦ A x + b` with `A` (row-major) symmetric positive semidefinite.
    #[staticmethod]
    fn affine(dim: usize, matrix: Vec<f64>, shift: Vec<f64>) -> PyResult<Self> {
        let inner = core::MongeMapSpec::affine(dim, matrix, shift).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn lipschitz(&self) -> f64 {
        self.inner.lipschitz
    }

    fn pushforward(&self, mu: &PyMeasure) -> PyResult<PyMeasure> {
        let inner = core::pushforward(&mu.inner, &self.inner).map_err(to_py)?;
        Ok(PyMeasure { inner })
    }
}

#[pyclass(name = "Coupling", module = "qotlab")]
struct PyCoupling {
    inner: core::Coupling,
}

#[pymethods]
impl PyCoupling {
    /// `(row, col, mass)` for every support entry.
    #[getter]
    fn entries(&self) -> Vec<(usize, usize, f64)> {
        self.inner.entries.iter().map(|e| (e.row, e.col, e.mass)).collect()
    }

    /// Row-major dense plan.
    fn dense(&self) -> Vec<f64> {
        self.inner.dense()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    fn support_size(&self) -> usize {
        self.inner.support_len()
    }

    fn transport_cost(&self, mu: &PyMeasure, nu: &PyMeasure) -> f64 {
        self.inner.transport_cost(&mu.inner, &nu.inner)
    }
}

#[pyclass(name = "DualPotentials", module = "qotlab")]
struct PyPotentials {
    inner: core::DualPotentials,
    config: core::SolverConfig,
}

#[pymethods]
impl PyPotentials {
    #[getter]
    fn f(&self) -> Vec<f64> {
        self.inner.f_values.clone()
    }

    #[getter]
    fn g(&self) -> Vec<f64> {
        self.inner.g_values.clone()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    fn dual_value(&self, mu: &PyMeasure, nu: &PyMeasure) -> f64 {
        self.inner.dual_value(&mu.inner, &nu.inner)
    }

    /// `f_ε` at an arbitrary point of the unit ball.
    fn f_at(&self, x: Vec<f64>, nu: &PyMeasure) -> PyResult<f64> {
        core::evaluate_f_at(&x, &self.inner, &nu.inner).map_err(to_py)
    }

    fn coupling(&self, mu: &PyMeasure, nu: &PyMeasure) -> PyResult<PyCoupling> {
        let inner = core::assemble_coupling(&self.inner, &mu.inner, &nu.inner, &self.config).map_err(to_py)?;
        Ok(PyCoupling { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Solves the regularised dual system at `epsilon`.
#[pyfunction]
#[pyo3(signature = (mu, nu, epsilon, tol = 1e-10, max_sweeps = 10_000))]
fn solve(
    py: Python<'_>,
    mu: &PyMeasure,
    nu: &PyMeasure,
    epsilon: f64,
    tol: f64,
    max_sweeps: usize,
) -> PyResult<PyPotentials> {
    let config = core::SolverConfig {
        epsilon,
        residual_tol: tol,
        max_sweeps,
        ..core::SolverConfig::default()
    };
    let (mu, nu) = (&mu.inner, &nu.inner);
    let inner = py.detach(|| core::solve(mu, nu, &config)).map_err(to_py)?;
    Ok(PyPotentials { inner, config })
}

#[pyclass(name = "ExactPlan", module = "qotlab")]
struct PyExact {
    inner: core::ExactOTSolution,
}

#[pymethods]
impl PyExact {
    #[getter]
    fn cost(&self) -> f64 {
        self.inner.cost
    }

    #[getter]
    fn f(&self) -> Vec<f64> {
        self.inner.f_star.clone()
    }

    #[getter]
    fn g(&self) -> Vec<f64> {
        self.inner.g_star.clone()
    }

    #[getter]
    fn entries(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .coupling
            .entries
            .iter()
            .map(|e| (e.row, e.col, e.mass))
            .collect()
    }
}

/// Unregularised optimal transport by network simplex.
#[pyfunction]
fn solve_exact(py: Python<'_>, mu: &PyMeasure, nu: &PyMeasure) -> PyResult<PyExact> {
    let (mu, nu) = (&mu.inner, &nu.inner);
    let inner = py.detach(|| core::solve_exact(mu, nu)).map_err(to_py)?;
    Ok(PyExact { inner })
}

#[pyclass(name = "SpreadProfile", module = "qotlab")]
struct PySpread {
    inner: core::SpreadProfile,
}

#[pymethods]
impl PySpread {
    #[new]
    fn new(mu: &PyMeasure) -> Self {
        Self {
            inner: core::build_spread(&mu.inner),
        }
    }

    fn rho(&self, r: f64) -> f64 {
        self.inner.rho(r)
    }

    fn delta(&self, epsilon: f64) -> f64 {
        self.inner.delta(epsilon)
    }

    fn delta_st(&self, epsilon: f64) -> f64 {
        self.inner.delta_st(epsilon)
    }

    #[getter]
    fn breaks(&self) -> Vec<f64> {
        self.inner.breaks.clone()
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.inner.levels.clone()
    }
}

#[pyclass(name = "Surrogate", module = "qotlab")]
struct PySurrogate {
    inner: core::ConvexSurrogate,
}

#[pymethods]
impl PySurrogate {
    /// Smoothed max-affine surrogate of the potentials, with `λ = 2 delta`.
    #[new]
    fn new(potentials: &PyPotentials, nu: &PyMeasure, delta: f64) -> PyResult<Self> {
        let inner = core::build_surrogate(&potentials.inner, &nu.inner, delta).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn smoothing(&self) -> f64 {
        self.inner.lambda
    }

    /// `(ψ(x), ∇ψ(x))`.
    fn psi(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let e = self.inner.eval_psi(&x).map_err(to_py)?;
        Ok((e.value, e.gradient))
    }

    /// `ψ*(y)`; `inf` outside the hull of the slopes.
    fn psi_star(&self, y: Vec<f64>) -> PyResult<f64> {
        self.inner.eval_psi_star(&y).map_err(to_py)
    }

    /// `(x′, ∇ψ(x′), F(u))` with `x′ + ∇ψ(x′) = u`.
    fn minty(&self, u: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let r = self.inner.minty_reflect(&u).map_err(to_py)?;
        Ok((r.x_prime, r.gradient, r.reflected))
    }
}

fn parse_checks(names: Option<Vec<String>>) -> PyResult<Vec<BoundId>> {
    match names {
        None => Ok(BoundId::ALL.to_vec()),
        Some(list) => list
            .iter()
            .map(|n| {
                serde_json::from_value(serde_json::Value::String(n.clone()))
                    .map_err(|_| PyValueError::new_err(format!("unknown bound id {n:?}")))
            })
            .collect(),
    }
}

/// Runs the bound checkers over an ε sweep; returns one dict per report.
#[pyfunction]
#[pyo3(signature = (mu, nu, eps_list, checks = None, map = None, name = "instance"))]
fn check_bounds(
    py: Python<'_>,
    mu: &PyMeasure,
    nu: &PyMeasure,
    eps_list: Vec<f64>,
    checks: Option<Vec<String>>,
    map: Option<PyMongeMap>,
    name: &str,
) -> PyResult<Py<PyAny>> {
    let inst = Instance {
        name: name.to_string(),
        mu: mu.inner.clone(),
        nu: nu.inner.clone(),
        monge: map.map(|m| m.inner),
    };
    let cfg = ExperimentConfig {
        instance: InstanceSource::Generator(GeneratorSpec::Singleton { dim: inst.mu.dim() }),
        eps_list,
        solver: core::SolverConfig::default(),
        checks: parse_checks(checks)?,
        output_dir: Default::default(),
        seed: 0,
    };
    cfg.validate().map_err(to_py)?;
    let reports = py
        .detach(|| prepare(&inst, &cfg.checks).and_then(|prep| sweep(&cfg, &inst, &prep)))
        .map_err(to_py)?;
    let text = serde_json::to_string(&reports).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

/// Runs a JSON experiment config; relative paths resolve against `base_dir`.
/// Returns the number of failed explicit-constant checks.
#[pyfunction]
#[pyo3(signature = (config_json, base_dir = "."))]
fn run_experiment(py: Python<'_>, config_json: &str, base_dir: &str) -> PyResult<usize> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let outcome = py
        .detach(|| qotlab::run_experiment(&cfg, Path::new(base_dir)))
        .map_err(to_py)?;
    Ok(outcome.failures().count())
}

/// Least-squares power law on log-log axes: `(slope, intercept, r_squared)`.
#[pyfunction]
fn fit_rate(eps: Vec<f64>, values: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let fit = core::fit_rate(&eps, &values).map_err(to_py)?;
    Ok((fit.slope, fit.intercept, fit.r_squared))
}

#[pymodule]
#[pyo3(name = "qotlab")]
fn qotlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyMongeMap>()?;
    m.add_class::<PyCoupling>()?;
    m.add_class::<PyPotentials>()?;
    m.add_class::<PyExact>()?;
    m.add_class::<PySpread>()?;
    m.add_class::<PySurrogate>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(check_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
