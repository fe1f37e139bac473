//! Python bindings: routing, networks, dead-capsule telemetry and the harness.
//!
//! Arrays cross the boundary as nested Python sequences (lists or numpy
//! arrays) and come back as nested lists.

pub mod routing;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use capsnet::capsule::{LayerKind, Network, NetworkSpec};
use capsnet::data::{generate_synthetic, SyntheticSpec};
use capsnet::diagnostics::ActivationLedger;
use capsnet::harness::{self, selftest, ExperimentConfig, RunRecord};
use capsnet::routing::{squash_vec, RoutingAlgorithm};
use capsnet::tensor::Tensor;
use capsnet::Error;

use routing::{route_arrays, Array, RouteRequest};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Tensor(_) if !e.is_config() => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn collect_array(obj: &Bound<'_, PyAny>, depth: usize, shape: &mut Vec<usize>, data: &mut Vec<f64>) -> PyResult<()> {
    if let Ok(x) = obj.extract::<f64>() {
        if depth != shape.len() {
            return Err(PyValueError::new_err("ragged array"));
        }
        data.push(x);
        return Ok(());
    }
    let items: Vec<Bound<'_, PyAny>> = obj.try_iter()?.collect::<PyResult<_>>()?;
    if depth == shape.len() {
        if !data.is_empty() {
            return Err(PyValueError::new_err("ragged array"));
        }
        shape.push(items.len());
    } else if shape.get(depth) != Some(&items.len()) {
        return Err(PyValueError::new_err("ragged array"));
    }
    for item in &items {
        collect_array(item, depth + 1, shape, data)?;
    }
    Ok(())
}

fn array_from_py(obj: &Bound<'_, PyAny>) -> PyResult<Array> {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    collect_array(obj, 0, &mut shape, &mut data)?;
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Array { data, shape })
}

fn tensor_from_py(obj: &Bound<'_, PyAny>) -> PyResult<Tensor> {
    array_from_py(obj)?.to_tensor().map_err(py_err)
}

fn nested<'py>(py: Python<'py>, data: &[f64], shape: &[usize]) -> PyResult<Bound<'py, PyAny>> {
    match shape {
        [] | [_] => Ok(PyList::new(py, data)?.into_any()),
        [n, rest @ ..] => {
            let stride = data.len() / n;
            let rows = data
                .chunks(stride)
                .map(|c| nested(py, c, rest))
                .collect::<PyResult<Vec<_>>>()?;
            Ok(PyList::new(py, rows)?.into_any())
        }
    }
}

fn array_to_py<'py>(py: Python<'py>, a: &Array) -> PyResult<Bound<'py, PyAny>> {
    nested(py, &a.data, &a.shape)
}

/// Routes votes `B×n_lower×n_higher×P×P` with lower activations `B×n_lower`.
///
/// Returns a dict with `poses`, `activations` and per-iteration `couplings`.
#[pyfunction]
#[pyo3(signature = (algorithm, votes, activations, lower_poses=None, w_route=None, beta_a=1.0, beta_u=0.5, iterations=3, epsilon=1e-8))]
#[allow(clippy::too_many_arguments)]
fn route<'py>(
    py: Python<'py>,
    algorithm: &str,
    votes: &Bound<'py, PyAny>,
    activations: &Bound<'py, PyAny>,
    lower_poses: Option<&Bound<'py, PyAny>>,
    w_route: Option<&Bound<'py, PyAny>>,
    beta_a: f64,
    beta_u: f64,
    iterations: usize,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let req = RouteRequest {
        algorithm: algorithm.to_string(),
        votes: array_from_py(votes)?,
        activations: array_from_py(activations)?,
        lower_poses: lower_poses.map(array_from_py).transpose()?,
        w_route: w_route.map(array_from_py).transpose()?,
        beta_a,
        beta_u,
        iterations,
        epsilon,
    };
    let out = route_arrays(&req).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("poses", array_to_py(py, &out.poses)?)?;
    d.set_item("activations", array_to_py(py, &out.activations)?)?;
    let couplings = out.couplings.iter().map(|c| array_to_py(py, c)).collect::<PyResult<Vec<_>>>()?;
    d.set_item("couplings", couplings)?;
    Ok(d)
}

/// `v · |v|² / (1 + |v|²) / sqrt(|v|² + eps)`
#[pyfunction]
#[pyo3(signature = (v, epsilon=1e-8))]
fn squash(v: Vec<f64>, epsilon: f64) -> Vec<f64> {
    squash_vec(&v, epsilon)
}

/// Mean activation and dead flag per capsule, streamed over batches of
/// `N×H×W×n_caps` activations.
#[pyfunction]
#[pyo3(signature = (batches, threshold=0.01))]
fn dead_capsules(batches: Vec<Bound<'_, PyAny>>, threshold: f64) -> PyResult<Vec<(f64, bool)>> {
    let tensors = batches.iter().map(tensor_from_py).collect::<PyResult<Vec<_>>>()?;
    let n_caps = match tensors.first() {
        Some(t) => *t.shape().last().expect("non-empty shape"),
        None => return Err(PyValueError::new_err("no activation batches")),
    };
    let mut ledger = ActivationLedger::new(0);
    let id = ledger.register(LayerKind::ConvCaps, n_caps);
    for t in &tensors {
        ledger.observe_batch(id, t).map_err(py_err)?;
    }
    let report = ledger.finalize(threshold).map_err(py_err)?;
    Ok(report.layers[0].capsules.iter().map(|c| (c.mean_activation, c.dead)).collect())
}

/// Procedural shape images: `(images N×1×S×S, labels)`.
#[pyfunction]
#[pyo3(signature = (n_classes=10, image_size=12, samples_per_class=10, seed=0))]
fn synthetic_dataset(
    py: Python<'_>,
    n_classes: usize,
    image_size: usize,
    samples_per_class: usize,
    seed: u64,
) -> PyResult<(Bound<'_, PyAny>, Vec<usize>)> {
    let ds = generate_synthetic(&SyntheticSpec::new(n_classes, image_size, samples_per_class, seed)).map_err(py_err)?;
    Ok((nested(py, ds.images.data(), ds.images.shape())?, ds.labels))
}

/// Quick gradient, invariant and telemetry checks as `(name, passed, detail)`.
#[pyfunction]
fn run_selftest() -> Vec<(String, bool, String)> {
    selftest::run_selftest().into_iter().map(|c| (c.name, c.passed, c.detail)).collect()
}

#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML; missing fields take their defaults.
    #[new]
    #[pyo3(signature = (toml=""))]
    fn new(toml: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml(toml).map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn algorithms(&self) -> Vec<&'static str> {
        self.inner.algorithms.iter().map(|a| a.name()).collect()
    }

    #[setter]
    fn set_algorithms(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.algorithms = names.iter().map(|n| n.parse()).collect::<Result<_, Error>>().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn depths(&self) -> Vec<usize> {
        self.inner.depths.clone()
    }

    #[setter]
    fn set_depths(&mut self, depths: Vec<usize>) {
        self.inner.depths = depths;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.epochs = epochs;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn outdir(&self) -> String {
        self.inner.outdir.display().to_string()
    }

    #[setter]
    fn set_outdir(&mut self, outdir: String) {
        self.inner.outdir = outdir.into();
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(algorithms={:?}, depths={:?}, epochs={})",
            self.algorithms(),
            self.inner.depths,
            self.inner.epochs
        )
    }
}

#[pyclass(name = "RunRecord")]
struct PyRunRecord {
    inner: RunRecord,
}

#[pymethods]
impl PyRunRecord {
    #[getter]
    fn name(&self) -> String {
        self.inner.run.name()
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.run.algorithm.name()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.run.depth
    }

    #[getter]
    fn test_accuracy(&self) -> f64 {
        self.inner.test_accuracy
    }

    #[getter]
    fn avg_dead_fraction(&self) -> f64 {
        self.inner.test_report.avg_dead_fraction
    }

    #[getter]
    fn avg_dead_count(&self) -> f64 {
        self.inner.test_report.avg_dead_count
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.inner.losses()
    }

    #[getter]
    fn diverged(&self) -> bool {
        self.inner.diverged()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("RunRecord({}, test_accuracy={:.4})", self.name(), self.inner.test_accuracy)
    }
}

/// Trains the first (algorithm, depth) cell of `config` and writes reports.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<PyRunRecord> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| harness::train(&cfg)).map_err(py_err)?;
    Ok(PyRunRecord { inner })
}

/// Trains every algorithm × depth × seed cell; failed runs are skipped.
#[pyfunction]
fn sweep(py: Python<'_>, config: &PyConfig) -> PyResult<Vec<PyRunRecord>> {
    let cfg = config.inner.clone();
    let out = py.detach(|| harness::sweep(&cfg)).map_err(py_err)?;
    Ok(out.records.into_iter().map(|inner| PyRunRecord { inner }).collect())
}

#[pyclass(name = "Network")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (in_channels, depth, n_classes, algorithm, n_caps=16, pose_dim=4, seed=0))]
    fn new(
        in_channels: usize,
        depth: usize,
        n_classes: usize,
        algorithm: &str,
        n_caps: usize,
        pose_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let alg: RoutingAlgorithm = algorithm.parse().map_err(py_err)?;
        let mut spec = NetworkSpec::new(in_channels, depth, n_classes, alg).with_caps(n_caps);
        spec.pose_dim = pose_dim;
        let inner = Network::build(&spec, seed).map_err(py_err)?;
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn layer_kinds(&self) -> Vec<&'static str> {
        self.inner.spec().layers().iter().map(|l| l.kind.name()).collect()
    }

    /// Class predictions for images `N×C×H×W`.
    fn predict(&self, images: &Bound<'_, PyAny>) -> PyResult<Vec<usize>> {
        let t = tensor_from_py(images)?;
        self.inner.predict(&t).map_err(py_err)
    }
}

#[pymodule]
fn capsnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(dead_capsules, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunRecord>()?;
    m.add_class::<PyNetwork>()?;
    Ok(())
}
