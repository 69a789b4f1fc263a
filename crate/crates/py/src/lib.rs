//! Python bindings. Built with maturin as the `qpe_lab` extension module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qpe_lab::baselines::{self, BoundParams, QpeaConfig};
use qpe_lab::harness::{self, Strategy, SweepConfig};
use qpe_lab::{model, AlgorithmConfig, Estimator, LossKind};

fn to_py(err: qpe_lab::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse_loss(loss: &str) -> PyResult<LossKind> {
    loss.parse().map_err(to_py)
}

#[pyclass(name = "NoiseModel", frozen)]
pub struct PyNoiseModel {
    inner: model::NoiseModel,
}

#[pymethods]
impl PyNoiseModel {
    #[new]
    #[pyo3(signature = (alpha = 1.0, beta = 1.0))]
    fn new(alpha: f64, beta: f64) -> PyResult<Self> {
        Ok(Self {
            inner: model::NoiseModel::new(alpha, beta).map_err(to_py)?,
        })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    fn contrast(&self, depth: u32) -> f64 {
        self.inner.contrast(depth)
    }

    fn optimal_depth(&self) -> Option<f64> {
        self.inner.optimal_depth()
    }

    fn variance_floor(&self, total_resources: f64) -> Option<f64> {
        self.inner.variance_floor(total_resources)
    }

    fn __repr__(&self) -> String {
        format!("NoiseModel(alpha={}, beta={})", self.inner.alpha(), self.inner.beta())
    }
}

fn noise_or_default(noise: Option<PyRef<'_, PyNoiseModel>>) -> model::NoiseModel {
    noise.map_or(model::NoiseModel::noiseless(), |n| n.inner)
}

#[pyclass(name = "Circuit", frozen)]
pub struct PyCircuit {
    inner: model::Circuit,
}

#[pymethods]
impl PyCircuit {
    #[new]
    fn new(depth: u32, phase: f64) -> PyResult<Self> {
        Ok(Self {
            inner: model::Circuit::new(depth, phase).map_err(to_py)?,
        })
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.inner.depth()
    }

    #[getter]
    fn phase(&self) -> f64 {
        self.inner.phase()
    }

    fn __repr__(&self) -> String {
        format!("Circuit(depth={}, phase={})", self.inner.depth(), self.inner.phase())
    }
}

#[pyfunction]
#[pyo3(signature = (theta, circuit, noise = None))]
fn success_probability(theta: f64, circuit: PyRef<'_, PyCircuit>, noise: Option<PyRef<'_, PyNoiseModel>>) -> f64 {
    model::success_probability(theta, circuit.inner, noise_or_default(noise))
}

#[pyfunction]
#[pyo3(signature = (theta, circuit, shots, successes, noise = None))]
fn log_likelihood(
    theta: f64,
    circuit: PyRef<'_, PyCircuit>,
    shots: u64,
    successes: f64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
) -> PyResult<f64> {
    let record = model::MeasurementRecord::new(circuit.inner, shots, successes).map_err(to_py)?;
    model::log_likelihood(&record, theta, noise_or_default(noise)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (theta, circuit, shots, noise = None))]
fn sigma_squared(
    theta: f64,
    circuit: PyRef<'_, PyCircuit>,
    shots: u64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
) -> PyResult<f64> {
    model::sigma_squared(theta, circuit.inner, shots, noise_or_default(noise)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (theta_guess, noise = None, depth_limit = 1 << 20))]
fn optimal_circuit(theta_guess: f64, noise: Option<PyRef<'_, PyNoiseModel>>, depth_limit: u32) -> PyResult<PyCircuit> {
    Ok(PyCircuit {
        inner: model::optimal_circuit(noise_or_default(noise), theta_guess, depth_limit).map_err(to_py)?,
    })
}

#[pyclass(name = "GridPosterior")]
pub struct PyGridPosterior {
    inner: qpe_lab::GridPosterior,
}

#[pymethods]
impl PyGridPosterior {
    #[new]
    #[pyo3(signature = (grid_size = 4096))]
    fn new(grid_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: qpe_lab::GridPosterior::uniform(grid_size).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (circuit, shots, successes, noise = None))]
    fn update(
        &mut self,
        circuit: PyRef<'_, PyCircuit>,
        shots: u64,
        successes: f64,
        noise: Option<PyRef<'_, PyNoiseModel>>,
    ) -> PyResult<()> {
        let record = model::MeasurementRecord::new(circuit.inner, shots, successes).map_err(to_py)?;
        self.inner.update(&record, noise_or_default(noise)).map_err(to_py)
    }

    fn angles(&self) -> Vec<f64> {
        self.inner.angles().collect()
    }

    fn density(&self) -> Vec<f64> {
        self.inner.density().to_vec()
    }

    fn map_estimate(&self) -> f64 {
        self.inner.map_estimate()
    }

    fn circular_mean_estimate(&self) -> PyResult<f64> {
        self.inner.circular_mean_estimate().map_err(to_py)
    }

    fn confidence(&self, center: f64, half_width: f64) -> PyResult<f64> {
        let interval = qpe_lab::CircularInterval::new(center, half_width).map_err(to_py)?;
        Ok(self.inner.confidence(&interval))
    }

    #[pyo3(signature = (estimate, loss = "mae"))]
    fn expected_loss(&self, estimate: f64, loss: &str) -> PyResult<f64> {
        Ok(self.inner.expected_loss(estimate, parse_loss(loss)?))
    }

    #[getter]
    fn grid_size(&self) -> usize {
        self.inner.grid_size()
    }
}

/// Runs one adaptive estimation and returns its trace as a JSON string.
#[pyfunction]
#[pyo3(signature = (n_tot, theta, noise = None, n_lim = 1 << 20, p = 3.0, epsilon = 1.0, grid = 4096, seed = 0, loss = "mae", estimator = "map"))]
#[allow(clippy::too_many_arguments)]
fn run_adaptive(
    n_tot: u64,
    theta: f64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    n_lim: u32,
    p: f64,
    epsilon: f64,
    grid: usize,
    seed: u64,
    loss: &str,
    estimator: &str,
) -> PyResult<String> {
    let config = AlgorithmConfig {
        total_resources: n_tot,
        depth_limit: n_lim,
        epsilon_exponent: p,
        epsilon_scale: epsilon,
        noise: noise_or_default(noise),
        loss_kind: parse_loss(loss)?,
        estimator: estimator.parse::<Estimator>().map_err(to_py)?,
        grid_size: grid,
        seed,
    };
    let trace = qpe_lab::run(&config, theta).map_err(to_py)?;
    serde_json::to_string(&trace).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn qpea_outcome_distribution(theta: f64, qubit_count: u32) -> PyResult<Vec<f64>> {
    baselines::qpea_outcome_distribution(theta, qubit_count).map_err(to_py)
}

/// Returns `(estimate, resources_spent)` of one QPEA run.
#[pyfunction]
#[pyo3(signature = (theta, qubit_count, seed = 0))]
fn run_qpea(theta: f64, qubit_count: u32, seed: u64) -> PyResult<(f64, u64)> {
    let cfg = QpeaConfig::new(qubit_count, model::NoiseModel::noiseless(), seed).map_err(to_py)?;
    let out = baselines::run_qpea(theta, &cfg, LossKind::AbsoluteError).map_err(to_py)?;
    Ok((out.estimate, out.resources_spent))
}

/// Returns `(sql, hl, noisy_floor)` reference MAE values.
#[pyfunction]
#[pyo3(signature = (n_tot, noise = None))]
fn limit_curves(n_tot: u64, noise: Option<PyRef<'_, PyNoiseModel>>) -> (f64, f64, Option<f64>) {
    let c = baselines::limit_curves(n_tot, noise_or_default(noise));
    (c.sql, c.hl, c.noisy_floor)
}

#[pyfunction]
#[pyo3(signature = (n_tot, step_count, p = 3.0, epsilon = 1.0, noise = None, loss = "mae"))]
fn loss_bound(
    n_tot: u64,
    step_count: u32,
    p: f64,
    epsilon: f64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    loss: &str,
) -> PyResult<f64> {
    let params = BoundParams {
        epsilon_scale: epsilon,
        exponent: p,
        step_count,
        total_resources: n_tot,
        noise: noise_or_default(noise),
    };
    baselines::appendix_loss_bound(&params, parse_loss(loss)?).map_err(to_py)
}

/// Returns `(bound, step_count)` minimised over feasible step counts.
#[pyfunction]
#[pyo3(signature = (n_tot, p = 3.0, epsilon = 1.0, noise = None, n_lim = 1 << 20, loss = "mae"))]
fn best_loss_bound(
    n_tot: u64,
    p: f64,
    epsilon: f64,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    n_lim: u32,
    loss: &str,
) -> PyResult<(f64, u32)> {
    baselines::best_loss_bound(n_tot, p, epsilon, noise_or_default(noise), n_lim, parse_loss(loss)?).map_err(to_py)
}

/// Returns `(slope, intercept, residual)` of a log-log least-squares fit.
#[pyfunction]
fn fit_loglog_slope(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = harness::fit_loglog_slope(&points).map_err(to_py)?;
    Ok((f.slope, f.intercept, f.residual))
}

/// Runs a sweep and returns the results CSV as a string.
#[pyfunction]
#[pyo3(signature = (strategies, ladder, k = 20, r = 10, noise = None, seed = 0))]
fn run_sweep(
    strategies: Vec<String>,
    ladder: Vec<u64>,
    k: usize,
    r: usize,
    noise: Option<PyRef<'_, PyNoiseModel>>,
    seed: u64,
) -> PyResult<String> {
    let strategies = strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let mut config = SweepConfig::new(strategies, ladder);
    config.theta_count = k;
    config.repetitions = r;
    config.noise = noise_or_default(noise);
    config.master_seed = seed;
    config.threads = harness::threads_from_env();
    let out = harness::run_sweep(&config).map_err(to_py)?;
    let mut buf = Vec::new();
    harness::write_results(&mut buf, &out.results).map_err(to_py)?;
    String::from_utf8(buf).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "qpe_lab")]
fn qpe_lab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseModel>()?;
    m.add_class::<PyCircuit>()?;
    m.add_class::<PyGridPosterior>()?;
    m.add_function(wrap_pyfunction!(success_probability, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_squared, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(run_adaptive, m)?)?;
    m.add_function(wrap_pyfunction!(qpea_outcome_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(run_qpea, m)?)?;
    m.add_function(wrap_pyfunction!(limit_curves, m)?)?;
    m.add_function(wrap_pyfunction!(loss_bound, m)?)?;
    m.add_function(wrap_pyfunction!(best_loss_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fit_loglog_slope, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
