//! Python bindings: tensors, config, model, trainer and the numerical oracles.
//!
//! Tensors cross the boundary as a flat list plus a shape; `numpy` callers use
//! `Tensor(a.ravel().tolist(), list(a.shape))` and `np.array(t.data).reshape(t.shape)`.

use std::path::PathBuf;

use ::c2e as core;
use core::checkpoint::Checkpoint;
use core::data::{synth_dataset, LabeledImages, SynthKind};
use core::probe;
use core::train::{RunOptions, Trainer};
use core::{C2eConfig, C2eError, C2eModel};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: C2eError) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyValueError::new_err(msg),
        4 => PyOSError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// JSON text to a Python object through the `json` module.
fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

#[pyclass(name = "Tensor", module = "c2e", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: core::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        core::Tensor::new(&shape, data).map(|inner| PyTensor { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn eye(n: usize) -> Self {
        PyTensor {
            inner: core::Tensor::eye(n),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Row-major values.
    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.matmul(&other.inner).map(|inner| PyTensor { inner }).map_err(to_py)
    }

    fn transpose(&self) -> PyResult<PyTensor> {
        self.inner.transpose().map(|inner| PyTensor { inner }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn tensor(t: core::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

#[pyclass(name = "Config", module = "c2e", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    pub inner: C2eConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults overridden by the fields of a JSON object; validated.
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner: C2eConfig = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => C2eConfig::default(),
        };
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Encoder widths from the input embedding down to the latent.
    fn widths(&self) -> PyResult<Vec<usize>> {
        Ok(self.inner.schedule().map_err(to_py)?.widths().to_vec())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }
}

#[pyclass(name = "Dataset", module = "c2e", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: LabeledImages,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn images(&self) -> PyTensor {
        tensor(self.inner.images.clone())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn groups(&self) -> Vec<usize> {
        self.inner.groups.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[staticmethod]
    fn load(path: PathBuf, image_size: usize) -> PyResult<Self> {
        core::data::load_dataset(&path, image_size)
            .map(|inner| PyDataset { inner })
            .map_err(to_py)
    }
}

#[pyclass(name = "Model", module = "c2e")]
pub struct PyModel {
    pub inner: C2eModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        C2eModel::new(&cfg).map(|inner| PyModel { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        ck.to_model().map(|inner| PyModel { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, None).save(&path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// `[B, H, W, 3]` images in `[0, 1]` to `[B, C₀]` pooled latent features.
    fn features(&self, images: &PyTensor) -> PyResult<PyTensor> {
        probe::extract_features(&self.inner, &images.inner).map(tensor).map_err(to_py)
    }

    /// Latent tokens `[B, T, C₀]` with every patch visible.
    fn encode(&self, images: &PyTensor) -> PyResult<PyTensor> {
        self.inner.encode_all(&images.inner).map(|z| tensor(z.tokens)).map_err(to_py)
    }

    /// `(reconstructed images, masked loss)` with `mask_ratio` of the patches
    /// of each image hidden, drawn from `seed`.
    #[pyo3(signature = (images, mask_ratio = 0.75, seed = 0))]
    fn reconstruct(&self, images: &PyTensor, mask_ratio: f64, seed: u64) -> PyResult<(PyTensor, f64)> {
        let batch = images.inner.shape().first().copied().unwrap_or(0);
        let mut rng = core::Rng::new(seed);
        let n = self.inner.cfg.num_patches();
        let plans = (0..batch)
            .map(|_| core::patch::plan_mask(n, mask_ratio, &mut rng))
            .collect::<core::Result<Vec<_>>>()
            .map_err(to_py)?;
        let (img, loss) = self.inner.reconstruct(&images.inner, &plans).map_err(to_py)?;
        Ok((tensor(img), loss))
    }
}

#[pyclass(name = "Trainer", module = "c2e")]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Trainer::new(&cfg).map(|inner| PyTrainer { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Trainer::from_checkpoint(&ck).map(|inner| PyTrainer { inner }).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// One optimizer update; returns the masked reconstruction loss.
    fn train_step(&mut self, data: &PyDataset) -> PyResult<f64> {
        self.inner.train_step(&data.inner).map(|o| o.loss).map_err(to_py)
    }

    /// Trains up to the configured step count; writes metrics, config and
    /// checkpoint to `out_dir` when given. Returns the run summary as a dict.
    #[pyo3(signature = (data, out_dir = None))]
    fn run<'py>(&mut self, py: Python<'py>, data: &PyDataset, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let summary = self
            .inner
            .run(
                &data.inner,
                &RunOptions {
                    out_dir,
                    record_time: false,
                },
            )
            .map_err(to_py)?;
        json_to_py(py, &serde_json::to_value(summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }

    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }
}

#[pyfunction]
fn synth(kind: &str, n: usize, seed: u64) -> PyResult<PyDataset> {
    let kind: SynthKind = kind.parse().map_err(to_py)?;
    synth_dataset(kind, n, seed).map(|inner| PyDataset { inner }).map_err(to_py)
}

/// Differential entropy (nats) of the Gaussian fitted to the rows of `z`.
#[pyfunction]
#[pyo3(signature = (z, jitter = 0.0))]
fn gaussian_entropy(z: &PyTensor, jitter: f64) -> PyResult<f64> {
    core::info::gaussian_entropy(&z.inner, jitter).map(|r| r.entropy).map_err(to_py)
}

#[pyfunction]
fn compression_objective(z: &PyTensor) -> PyResult<f64> {
    core::info::compression_objective(&z.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (z, jitter = 0.0))]
fn exact_entropy_gradient(z: &PyTensor, jitter: f64) -> PyResult<PyTensor> {
    core::info::exact_entropy_gradient(&z.inner, jitter).map(tensor).map_err(to_py)
}

#[pyfunction]
fn concavity_probe(a: &PyTensor, b: &PyTensor) -> PyResult<bool> {
    core::info::concavity_probe(&a.inner, &b.inner).map_err(to_py)
}

/// Linear probe on `features` with `test_frac` of the groups held out.
/// Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (features, labels, groups, test_frac = 0.25, seed = 0, task = "probe"))]
fn linear_probe<'py>(
    py: Python<'py>,
    features: &PyTensor,
    labels: Vec<usize>,
    groups: Vec<usize>,
    test_frac: f64,
    seed: u64,
    task: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let split = probe::group_split(&groups, test_frac, seed).map_err(to_py)?;
    let report = probe::linear_probe(task, &features.inner, &labels, &groups, &split, seed).map_err(to_py)?;
    json_to_py(py, &serde_json::to_value(report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// `[(train_groups, test_groups)]`, one pair per seed.
#[pyfunction]
fn fewshot_splits(groups: Vec<usize>, k: usize, seeds: Vec<u64>) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    let splits = probe::make_fewshot_splits(&groups, k, &seeds).map_err(to_py)?;
    Ok(splits.into_iter().map(|s| (s.train_groups, s.test_groups)).collect())
}

#[pymodule]
#[pyo3(name = "c2e")]
pub fn c2e_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(compression_objective, m)?)?;
    m.add_function(wrap_pyfunction!(exact_entropy_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(concavity_probe, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(fewshot_splits, m)?)?;
    Ok(())
}
