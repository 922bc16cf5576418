//! Python bindings: `import knspread`.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spread_core::asymptotics::{self, CwVariant};
use spread_core::chain::{self, RunOptions, SnapshotOptions};
use spread_core::harness::{self, ExperimentConfig};
use spread_core::mgw;
use spread_core::model::{self, ModelSpec};
use spread_core::offspring::OffspringLaw;
use spread_core::Error;

create_exception!(knspread, SubcriticalError, PyValueError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Subcritical { .. } => SubcriticalError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::RunawayEpidemic(_) | Error::InsufficientSurvivors { .. } | Error::NonConvergence(_) | Error::ConvergenceFailure(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cw(variant: &str) -> PyResult<CwVariant> {
    CwVariant::parse(variant).map_err(to_py)
}

/// Multitype model: type proportions `gamma`, weights `beta`, one offspring
/// law per type given as `(family, params)`.
#[pyclass(name = "Model", module = "knspread", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelSpec,
}

fn law_from(family: &str, params: Vec<f64>) -> PyResult<OffspringLaw> {
    let doc = serde_json::json!({ "family": family, "params": params });
    serde_json::from_value(doc).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (gamma, beta, offspring, i0 = 0))]
    fn new(gamma: Vec<f64>, beta: Vec<f64>, offspring: Vec<(String, Vec<f64>)>, i0: usize) -> PyResult<Self> {
        let laws = offspring.into_iter().map(|(f, p)| law_from(&f, p)).collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: ModelSpec::new(gamma, beta, laws, i0).map_err(to_py)? })
    }

    /// Single-type model with `beta = 1`.
    #[staticmethod]
    fn homogeneous(family: &str, params: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: ModelSpec::homogeneous(law_from(family, params)?) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelSpec::from_json(text).map_err(to_py)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn types(&self) -> usize {
        self.inner.types()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma().to_vec()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta().to_vec()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha().to_vec()
    }

    #[getter]
    fn offspring_means(&self) -> Vec<f64> {
        self.inner.offspring_means()
    }

    /// Spectral radius of the mean offspring matrix.
    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho_closed_form()
    }

    fn __repr__(&self) -> String {
        format!("Model(gamma={:?}, beta={:?}, means={:?})", self.inner.gamma(), self.inner.beta(), self.inner.offspring_means())
    }
}

/// Limit constants of a supercritical model.
#[pyclass(name = "Predictions", module = "knspread", frozen)]
struct PyPredictions {
    inner: asymptotics::Predictions,
}

#[pymethods]
impl PyPredictions {
    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }
    #[getter]
    fn w_vector(&self) -> Vec<f64> {
        self.inner.w_vector.clone()
    }
    #[getter]
    fn w_total(&self) -> f64 {
        self.inner.w_total
    }
    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho
    }
    #[getter]
    fn sigma_mgw(&self) -> f64 {
        self.inner.sigma_mgw
    }
    #[getter]
    fn var_tau_tilde(&self) -> f64 {
        self.inner.var_tau_tilde
    }
    #[getter]
    fn var_tau(&self) -> f64 {
        self.inner.var_tau
    }
    #[getter]
    fn var_w(&self) -> f64 {
        self.inner.var_w
    }
    #[getter]
    fn c_w(&self) -> f64 {
        self.inner.c_w
    }
    /// `(var_tau_tilde, var_tau, var_w)` from the delta-method derivation.
    #[getter]
    fn derived(&self) -> (f64, f64, f64) {
        let d = &self.inner.derived;
        (d.var_tau_tilde, d.var_tau, d.var_w)
    }
    #[getter]
    fn degenerate(&self) -> Vec<String> {
        self.inner.degenerate.clone()
    }
    fn to_json(&self) -> String {
        self.inner.to_json()
    }
    fn __repr__(&self) -> String {
        format!("Predictions(theta={}, w_total={}, sigma_mgw={})", self.inner.theta, self.inner.w_total, self.inner.sigma_mgw)
    }
}

/// Outcome of one discrete-time epidemic.
#[pyclass(name = "Epidemic", module = "knspread", frozen, get_all)]
struct PyEpidemic {
    n: u64,
    tau: u64,
    tau_tilde: f64,
    final_counts: Vec<u64>,
    total_infected: u64,
    full_transmission: bool,
}

#[pymethods]
impl PyEpidemic {
    fn __repr__(&self) -> String {
        format!("Epidemic(n={}, tau={}, total_infected={})", self.n, self.tau, self.total_infected)
    }
}

fn epidemic(r: &chain::EpidemicResult) -> PyEpidemic {
    PyEpidemic {
        n: r.n,
        tau: r.tau,
        tau_tilde: r.tau_tilde,
        final_counts: r.final_counts.clone(),
        total_infected: r.total_infected,
        full_transmission: r.full_transmission,
    }
}

#[pyfunction]
fn solve_theta(model: &PyModel) -> PyResult<f64> {
    asymptotics::solve_theta(&model.inner).map_err(to_py)
}

#[pyfunction]
fn extinction_probability(model: &PyModel) -> PyResult<f64> {
    Ok(mgw::extinction_probability(&model.inner).map_err(to_py)?.sigma_mgw)
}

#[pyfunction]
fn spectral_radius(model: &PyModel) -> PyResult<f64> {
    model::spectral_radius(&model::mean_matrix(&model.inner)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (model, cw_variant = "proof"))]
fn predictions(model: &PyModel, cw_variant: &str) -> PyResult<PyPredictions> {
    Ok(PyPredictions { inner: asymptotics::predictions(&model.inner, cw(cw_variant)?).map_err(to_py)? })
}

/// Runs one epidemic on a population of `n` vertices.
#[pyfunction]
#[pyo3(signature = (model, n, seed = 0))]
fn run_epidemic(py: Python<'_>, model: &PyModel, n: u64, seed: u64) -> PyResult<PyEpidemic> {
    let spec = model.inner.clone();
    py.detach(move || {
        let inst = model::realize_instance(&spec, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chain::run_epidemic(&inst, &mut rng, RunOptions::default()).map(|r| epidemic(&r))
    })
    .map_err(to_py)
}

/// Runs the branching-process coupling; returns the epidemic and the
/// number of failed attempts.
#[pyfunction]
#[pyo3(signature = (model, n, seed = 0))]
fn run_coupled(py: Python<'_>, model: &PyModel, n: u64, seed: u64) -> PyResult<(PyEpidemic, u64)> {
    let spec = model.inner.clone();
    py.detach(move || {
        let inst = model::realize_instance(&spec, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mgw::run_coupled(&inst, &mut rng, RunOptions::default()).map(|r| (epidemic(&r.epidemic), r.failures))
    })
    .map_err(to_py)
}

/// Per-type infected counts of the continuous-time process at times
/// `n * s` for `s` in `grid`.
#[pyfunction]
#[pyo3(signature = (model, n, grid, seed = 0))]
fn continuous_snapshot(py: Python<'_>, model: &PyModel, n: u64, grid: Vec<f64>, seed: u64) -> PyResult<Vec<Vec<u64>>> {
    let spec = model.inner.clone();
    py.detach(move || {
        let inst = model::realize_instance(&spec, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        chain::continuous_snapshot(&inst, &grid, &SnapshotOptions::default(), &mut rng).map(|s| s.counts)
    })
    .map_err(to_py)
}

/// Replicate rows for one population size as CSV text.
#[pyfunction]
#[pyo3(signature = (config_json, n = None, threads = None))]
fn simulate(py: Python<'_>, config_json: &str, n: Option<u64>, threads: Option<usize>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    py.detach(move || {
        let n = match n {
            Some(n) => n,
            None => cfg.populations()?[0],
        };
        let rows = harness::simulate(&cfg, n, 0, threads)?;
        let mut buf = Vec::new();
        chain::write_rows_csv(&mut buf, &rows)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    })
    .map_err(to_py)
}

/// Runs the checks of an experiment config; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, threads = None))]
fn run_experiment(py: Python<'_>, config_json: &str, threads: Option<usize>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    py.detach(move || harness::run_experiment(&cfg, threads).map(|r| r.to_json())).map_err(to_py)
}

#[pymodule]
fn knspread(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPredictions>()?;
    m.add_class::<PyEpidemic>()?;
    m.add("SubcriticalError", m.py().get_type::<SubcriticalError>())?;
    m.add_function(wrap_pyfunction!(solve_theta, m)?)?;
    m.add_function(wrap_pyfunction!(extinction_probability, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(predictions, m)?)?;
    m.add_function(wrap_pyfunction!(run_epidemic, m)?)?;
    m.add_function(wrap_pyfunction!(run_coupled, m)?)?;
    m.add_function(wrap_pyfunction!(continuous_snapshot, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
