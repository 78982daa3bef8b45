//! Python bindings: datasets, noise injection, the network, prediction
//! histories, MP/MR and the experiment runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use prestopping::data::{self, NoiseKind};
use prestopping::memorization::{self, MemorizationState};
use prestopping::nn::{self, Batch, NetworkSpec, NetworkState};
use prestopping::runner::{self, ExperimentConfig};
use prestopping::{Error, Matrix};
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::IndexOutOfRange { .. } => PyIndexError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::HeuristicNotTriggered { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Features with noisy and true labels.
#[pyclass(name = "Dataset", module = "prestopping_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::NoisyDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, classes, true_labels=None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
        true_labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let x = matrix(features)?;
        let inner = match true_labels {
            Some(t) => data::NoisyDataset::with_labels(x, labels, t, classes, Default::default()),
            None => data::NoisyDataset::clean(x, labels, classes),
        }
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (classes, per_class, dim, spread=1.0, separation=4.0, seed=0))]
    fn synthetic(
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        separation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = data::synth_gaussian(&data::SynthSpec {
            classes,
            per_class,
            dim,
            spread,
            separation,
            seed,
        })
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, true_labels=false, classes=None))]
    fn from_csv(path: PathBuf, true_labels: bool, classes: Option<usize>) -> PyResult<Self> {
        let opts = data::CsvOptions {
            classes,
            true_label_column: true_labels,
        };
        Ok(Self {
            inner: data::load_csv(&path, &opts).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, &path).map_err(to_py)
    }

    /// Returns a copy with `kind` ("none", "symmetric", "pair") noise at `tau`.
    fn with_noise(&self, kind: &str, tau: f64, seed: u64) -> PyResult<Self> {
        let kind: NoiseKind = kind.parse().map_err(to_py)?;
        Ok(Self {
            inner: data::apply_noise(&self.inner, kind, tau, seed).map_err(to_py)?,
        })
    }

    /// `(train, (val_features, val_labels), (test_features, test_labels))`.
    #[allow(clippy::type_complexity)]
    fn split(
        &self,
        validation_size: usize,
        test_size: usize,
        seed: u64,
    ) -> PyResult<(
        Self,
        (Vec<Vec<f64>>, Vec<usize>),
        (Vec<Vec<f64>>, Vec<usize>),
    )> {
        let s = data::split(
            &self.inner,
            &data::SplitSpec {
                validation_size,
                test_size,
                seed,
            },
        )
        .map_err(to_py)?;
        Ok((
            Self { inner: s.train },
            (rows(&s.validation.features), s.validation.labels),
            (rows(&s.test.features), s.test.labels),
        ))
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.features())
    }

    #[getter]
    fn noisy_labels(&self) -> Vec<usize> {
        self.inner.noisy_labels().to_vec()
    }

    #[getter]
    fn true_labels(&self) -> Vec<usize> {
        self.inner.true_labels().to_vec()
    }

    #[getter]
    fn flipped_fraction(&self) -> f64 {
        self.inner.provenance().flipped_fraction
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// ReLU MLP with softmax output and momentum SGD state.
#[pyclass(name = "Network", module = "prestopping_py", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkState,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (input_dim, hidden, classes, seed=0))]
    fn new(input_dim: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Self> {
        let spec = NetworkSpec::mlp(input_dim, &hidden, classes).map_err(to_py)?;
        Ok(Self {
            inner: NetworkState::init(spec, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| to_py(e.into()))?;
        Ok(Self {
            inner: nn::read_checkpoint(f).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(&path).map_err(|e| to_py(e.into()))?;
        nn::write_checkpoint(&self.inner, f).map_err(to_py)
    }

    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(
            &self.inner.forward(&matrix(features)?).map_err(to_py)?,
        ))
    }

    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(features)?).map_err(to_py)
    }

    fn error(&self, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        nn::evaluate_error(&matrix(features)?, &labels, &self.inner).map_err(to_py)
    }

    /// Mean cross-entropy and its gradient, flattened layer by layer
    /// (weights then biases).
    fn loss_and_grad(
        &self,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let x = matrix(features)?;
        let batch = Batch::new((0..x.rows()).collect(), x, labels).map_err(to_py)?;
        let lg = nn::loss_and_grad(&batch, &self.inner).map_err(to_py)?;
        Ok((lg.loss, lg.grad.iter().copied().collect()))
    }

    /// One momentum step on the mean loss of the given rows.
    #[pyo3(signature = (features, labels, lr, momentum=0.9))]
    fn step(
        &mut self,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        lr: f64,
        momentum: f64,
    ) -> PyResult<f64> {
        let x = matrix(features)?;
        let batch = Batch::new((0..x.rows()).collect(), x, labels).map_err(to_py)?;
        let lg = nn::loss_and_grad(&batch, &self.inner).map_err(to_py)?;
        let cfg = nn::OptimizerConfig {
            base_lr: lr,
            momentum,
            decay_points: vec![],
            decay_factor: 1.0,
            ..Default::default()
        };
        nn::sgd_step(&mut self.inner, &lg.grad, &cfg, 0).map_err(to_py)?;
        Ok(lg.loss)
    }

    #[getter]
    fn parameters(&self) -> Vec<f64> {
        self.inner.params.iter().copied().collect()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.len()
    }
}

/// Ring buffer of the last `q` predicted labels per sample.
#[pyclass(name = "PredictionHistory", module = "prestopping_py")]
struct PyHistory {
    inner: memorization::PredictionHistory,
}

#[pymethods]
impl PyHistory {
    #[new]
    #[pyo3(signature = (samples, classes, q=10))]
    fn new(samples: usize, classes: usize, q: usize) -> PyResult<Self> {
        Ok(Self {
            inner: memorization::PredictionHistory::new(samples, q, classes).map_err(to_py)?,
        })
    }

    fn record(&mut self, sample: usize, label: usize) -> PyResult<()> {
        self.inner.record(sample, label).map_err(to_py)
    }

    fn entries(&self, sample: usize) -> PyResult<Vec<usize>> {
        self.check(sample)?;
        Ok(self.inner.entries(sample))
    }

    fn label_probability(&self, sample: usize, label: usize) -> PyResult<f64> {
        self.check(sample)?;
        self.inner.label_probability(sample, label).map_err(to_py)
    }

    fn is_memorized(&self, sample: usize, noisy_label: usize) -> PyResult<bool> {
        self.check(sample)?;
        Ok(self.inner.is_memorized(sample, noisy_label))
    }

    /// Per-sample memorization flags.
    fn memorized(&self, noisy_labels: Vec<usize>) -> PyResult<Vec<bool>> {
        if noisy_labels.len() != self.inner.samples() {
            return Err(PyValueError::new_err("one label per sample required"));
        }
        Ok(self.inner.memorization(&noisy_labels).memorized)
    }
}

impl PyHistory {
    fn check(&self, sample: usize) -> PyResult<()> {
        if sample >= self.inner.samples() {
            return Err(PyIndexError::new_err(format!(
                "sample {sample} out of range"
            )));
        }
        Ok(())
    }
}

/// `(precision, recall)` of the memorized set against the true labels.
#[pyfunction]
fn mp_mr(
    memorized: Vec<bool>,
    noisy_labels: Vec<usize>,
    true_labels: Vec<usize>,
) -> PyResult<(f64, f64)> {
    if memorized.len() != noisy_labels.len() || noisy_labels.len() != true_labels.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let m = memorization::mp_mr(
        &MemorizationState { memorized },
        &noisy_labels,
        &true_labels,
    );
    Ok((m.precision, m.recall))
}

#[pyfunction]
fn symmetric_matrix(classes: usize, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = data::build_symmetric_matrix(classes, tau).map_err(to_py)?;
    Ok((0..classes).map(|i| t.row(i).to_vec()).collect())
}

#[pyfunction]
fn pair_matrix(classes: usize, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let t = data::build_pair_matrix(classes, tau).map_err(to_py)?;
    Ok((0..classes).map(|i| t.row(i).to_vec()).collect())
}

fn load_config(
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<ExperimentConfig> {
    let overrides = overrides.unwrap_or_default();
    match config {
        Some(p) => ExperimentConfig::from_file(&p, &overrides),
        None => ExperimentConfig::from_pairs(&overrides),
    }
    .map_err(to_py)
}

/// Runs every configured seed and returns a list of per-run summaries.
/// Keyword `overrides` maps config keys to string values.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = load_config(config, overrides)?;
    let report = runner::run_experiment(&cfg).map_err(to_py)?;
    if let Some((seed, msg)) = report.failures.first() {
        return Err(PyRuntimeError::new_err(format!(
            "seed {seed} failed: {msg}"
        )));
    }
    report
        .runs
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", &r.summary.method)?;
            d.set_item("heuristic", &r.summary.heuristic)?;
            d.set_item("noise", r.summary.noise.as_str())?;
            d.set_item("tau", r.summary.tau)?;
            d.set_item("q", r.summary.q)?;
            d.set_item("seed", r.summary.seed)?;
            d.set_item("best_test_error", r.summary.best_test_error)?;
            d.set_item("stop_epoch", r.summary.stop_epoch)?;
            d.set_item(
                "test_error",
                r.metrics.iter().map(|m| m.test_error).collect::<Vec<_>>(),
            )?;
            d.set_item("output_dir", cfg.seed_dir(r.summary.seed))?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn prestopping_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyHistory>()?;
    m.add_function(wrap_pyfunction!(mp_mr, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(pair_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
