//! Python bindings: the model type plus the main analysis entry points.
//!
//! ```python
//! import cwndnet_py as cw
//! model = cw.NetworkModel.from_file("single_route.model")
//! cw.solve(model)["lambda_star"]          # {"r0": 1.0}
//! cw.exact_throughput(model, c=3)         # {"lambda_c": {...}, ...}
//! cw.simulate(model, c=3, seed=1, time=1e4, reps=4)
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cwndnet::cli;
use cwndnet::exact::{self, ExactOptions};
use cwndnet::model::{self, ModelIndex};
use cwndnet::optimize;
use cwndnet::simulate as sim_engine;
use cwndnet::simulate::SimConfig;

fn to_py_err(e: cwndnet::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// A validated queueing network with window-controlled routes.
#[pyclass(frozen)]
pub struct NetworkModel {
    inner: model::NetworkModel,
}

impl NetworkModel {
    fn index(&self) -> PyResult<ModelIndex> {
        ModelIndex::new(&self.inner).map_err(to_py_err)
    }
}

#[pymethods]
impl NetworkModel {
    /// Parse a model from TOML text.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = cli::parse_model(text).map_err(to_py_err)?;
        Ok(NetworkModel { inner })
    }

    /// Load a model file.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let source = cli::load_model(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(NetworkModel {
            inner: source.model,
        })
    }

    /// Invariant violations as strings; empty means the model is usable.
    fn validate(&self) -> Vec<String> {
        model::validate_network(&self.inner)
            .iter()
            .map(|v| v.to_string())
            .collect()
    }

    /// Copy with every route's window capped at `cap * c` packets.
    fn with_window_caps(&self, cap: u64) -> Self {
        NetworkModel {
            inner: self.inner.with_window_caps(cap),
        }
    }

    fn queue_ids(&self) -> Vec<String> {
        self.inner.queues.iter().map(|q| q.id.clone()).collect()
    }

    fn route_ids(&self) -> Vec<String> {
        self.inner.routes.iter().map(|r| r.id.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "NetworkModel(queues={}, routes={})",
            self.inner.queues.len(),
            self.inner.routes.len()
        )
    }
}

fn route_dict<'py>(
    py: Python<'py>,
    idx: &ModelIndex,
    values: &[f64],
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (i, r) in idx.model.routes.iter().enumerate() {
        d.set_item(&r.id, values[i])?;
    }
    Ok(d)
}

fn queue_dict<'py>(
    py: Python<'py>,
    idx: &ModelIndex,
    values: &[f64],
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (j, q) in idx.model.queues.iter().enumerate() {
        d.set_item(&q.id, values[j])?;
    }
    Ok(d)
}

/// Utility-optimal rate allocation with prices and certificates.
#[pyfunction]
#[pyo3(signature = (model, tol=1e-8))]
fn solve<'py>(py: Python<'py>, model: &NetworkModel, tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let idx = model.index()?;
    let (alloc, prices, kkt) = optimize::solve_system(&idx, tol).map_err(to_py_err)?;
    let entropy =
        optimize::primal_reconstruct(&idx, &alloc, &prices, tol.max(1e-6)).map_err(to_py_err)?;
    let dual: f64 = (0..idx.n_routes())
        .map(|i| idx.control(i).utility.value(alloc.lambda[i]).unwrap())
        .sum();
    let out = PyDict::new(py);
    out.set_item("lambda_star", route_dict(py, &idx, &alloc.lambda)?)?;
    out.set_item("q_star", queue_dict(py, &idx, &prices.q)?)?;
    out.set_item("beta_star_primal", entropy.objective)?;
    out.set_item("beta_star_dual", dual)?;
    out.set_item("gap", (entropy.objective - dual).abs())?;
    out.set_item("kkt_max_residual", kkt.max_residual())?;
    let mbar = PyDict::new(py);
    for (i, r) in idx.model.routes.iter().enumerate() {
        mbar.set_item(&r.id, entropy.m_bar[i])?;
    }
    out.set_item("m_bar_star", mbar)?;
    Ok(out)
}

/// Exact stationary throughput at congestion level `c`.
#[pyfunction]
#[pyo3(signature = (model, c, n_max=None))]
fn exact_throughput<'py>(
    py: Python<'py>,
    model: &NetworkModel,
    c: u64,
    n_max: Option<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let idx = model.index()?;
    let opts = match n_max {
        Some(n) => ExactOptions::explicit(n),
        None => ExactOptions::default(),
    };
    let table = exact::stationary_distribution(&idx, c, &opts).map_err(to_py_err)?;
    let report = exact::exact_throughput(&idx, &table);
    let out = PyDict::new(py);
    out.set_item("lambda_c", route_dict(py, &idx, &report.lambda)?)?;
    out.set_item(
        "mean_window_over_c",
        route_dict(py, &idx, &report.mean_window_over_c)?,
    )?;
    out.set_item("tail_bound", table.tail_bound)?;
    out.set_item("n_max", table.n_max)?;
    out.set_item("states", table.n_states())?;
    Ok(out)
}

/// Event-driven simulation; statistics across replications.
#[pyfunction]
#[pyo3(signature = (model, c, seed=0, time=10_000.0, warmup=None, reps=2))]
fn simulate<'py>(
    py: Python<'py>,
    model: &NetworkModel,
    c: u64,
    seed: u64,
    time: f64,
    warmup: Option<f64>,
    reps: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let idx = model.index()?;
    let mut config = SimConfig::new(seed, c, time).with_replications(reps);
    if let Some(w) = warmup {
        config = config.with_warmup(w);
    }
    let stats = sim_engine::simulate(&idx, &config).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("throughput", route_dict(py, &idx, &stats.throughput_mean)?)?;
    out.set_item("throughput_se", route_dict(py, &idx, &stats.throughput_se)?)?;
    out.set_item("sojourn", queue_dict(py, &idx, &stats.sojourn_mean)?)?;
    out.set_item("mean_window", route_dict(py, &idx, &stats.window_mean)?)?;
    if reps >= 2 {
        let little = sim_engine::little_check(&idx, &stats, 4.0).map_err(to_py_err)?;
        out.set_item("little_violations", little.violations.len())?;
    }
    out.set_item("degenerate", stats.degenerate)?;
    Ok(out)
}

/// Empirical large-deviations slope at a scaled target point.
#[pyfunction]
#[pyo3(signature = (model, target, c_values=vec![20, 40, 80, 160]))]
fn ldp_check<'py>(
    py: Python<'py>,
    model: &NetworkModel,
    target: Vec<f64>,
    c_values: Vec<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let idx = model.index()?;
    let source = cli::ModelSource::in_memory(model.inner.clone());
    let cfg = cli::ExperimentConfig::new(c_values);
    let mut sinkhole = Vec::new();
    let report =
        cli::run_ldp_check(&mut sinkhole, &idx, &source, &target, &cfg).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("y", report.y)?;
    out.set_item("c_values", report.c_values)?;
    out.set_item("fitted", report.fitted)?;
    out.set_item("analytic", report.analytic)?;
    out.set_item("deviation", report.deviation)?;
    Ok(out)
}

/// Window injection rate `g^(c)(m)` of a fairness controller.
#[pyfunction]
fn window_rate(alpha: f64, weight: f64, c: u64, m: u64) -> PyResult<f64> {
    let u = cwndnet::model::Utility::alpha_fair(alpha, weight).map_err(to_py_err)?;
    Ok(cwndnet::model::CongestionControl::new(u).window_rate(c, m))
}

#[pymodule]
fn cwndnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<NetworkModel>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(exact_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ldp_check, m)?)?;
    m.add_function(wrap_pyfunction!(window_rate, m)?)?;
    Ok(())
}
