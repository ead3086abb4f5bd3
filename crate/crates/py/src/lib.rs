//! Python bindings: tensors with reverse-mode gradients, the velocity
//! model, sampling, training and the curation helpers.

use std::path::PathBuf;

use flowdit::cli::{cmd_train, TrainArgs};
use flowdit::container::Container;
use flowdit::datapipe::{dedup_converge, score_bucket, stage_resize, DedupConfig, EmbeddingRecord, ResizePlan, Stage};
use flowdit::flow::{sample, SamplerConfig};
use flowdit::model::{Dit, ModelConfig};
use flowdit::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape(_) | Error::Config(_) | Error::Domain(_) | Error::Validation(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

/// Dense `float64` tensor that records operations for `backward()`.
#[pyclass(name = "Tensor")]
struct PyTensor(Tensor<f64>);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = Tensor::from_vec(&shape, data).map_err(py_err)?;
        Ok(PyTensor(if requires_grad { t.param() } else { t }))
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed = 0, std = 1.0, requires_grad = false))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64, requires_grad: bool) -> Self {
        let t = Tensor::randn(&shape, std, &mut ChaCha8Rng::seed_from_u64(seed));
        PyTensor(if requires_grad { t.param() } else { t })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.0.requires_grad()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    fn item(&self) -> PyResult<f64> {
        self.0.item().map_err(py_err)
    }

    /// Accumulated gradient as a flat list, or `None`.
    fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad()
    }

    fn zero_grad(&self) {
        self.0.zero_grad();
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().map_err(py_err)
    }

    fn detach(&self) -> Self {
        PyTensor(self.0.detach())
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(&shape).map(PyTensor).map_err(py_err)
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.matmul(&other.0).map(PyTensor).map_err(py_err)
    }

    fn __matmul__(&self, other: &PyTensor) -> PyResult<Self> {
        self.matmul(other)
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.add(&other.0).map(PyTensor).map_err(py_err)
    }

    fn __sub__(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.sub(&other.0).map(PyTensor).map_err(py_err)
    }

    fn __mul__(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.mul(&other.0).map(PyTensor).map_err(py_err)
    }

    fn scale(&self, factor: f64) -> Self {
        PyTensor(self.0.scale(factor))
    }

    fn silu(&self) -> Self {
        PyTensor(self.0.silu())
    }

    fn softmax(&self) -> PyResult<Self> {
        self.0.softmax_lastdim().map(PyTensor).map_err(py_err)
    }

    fn sum(&self) -> Self {
        PyTensor(self.0.sum_all())
    }

    fn mean(&self) -> Self {
        PyTensor(self.0.mean_all())
    }

    fn __len__(&self) -> usize {
        self.0.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.0.shape(), self.0.requires_grad())
    }
}

/// The diffusion transformer in `float32`.
#[pyclass(name = "Dit")]
struct PyDit(Dit<f32>);

#[pymethods]
impl PyDit {
    /// `preset` is `"desk"`, `"tiny"` or `"paper_scale"`; `config_json`
    /// overrides it with an explicit model configuration.
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0, config_json = None))]
    fn new(preset: &str, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let config = match (config_json, preset) {
            (Some(json), _) => serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?,
            (None, "desk") => ModelConfig::desk(),
            (None, "tiny") => ModelConfig::tiny(),
            (None, "paper_scale") => ModelConfig::paper_scale(),
            (None, other) => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
        };
        Dit::new(&config, seed).map(PyDit).map_err(py_err)
    }

    /// Reads the `model.` tensors of a checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Container::load(&path).map_err(py_err)?;
        Dit::read_from(&c, "model", None).map(PyDit).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut c = Container::new();
        self.0.write_to(&mut c, "model").map_err(py_err)?;
        c.save(&path).map_err(py_err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn num_trainable(&self) -> usize {
        self.0.num_trainable()
    }

    #[getter]
    fn head_schedule(&self) -> Vec<usize> {
        self.0.config.head_schedule.clone()
    }

    /// Velocity for a flat `[B, C, H, W]` latent batch at times `t`.
    fn velocity(&self, latent: Vec<f32>, shape: Vec<usize>, t: Vec<f64>, prompts: Vec<String>) -> PyResult<Vec<f32>> {
        let x = Tensor::from_vec(&shape, latent).map_err(py_err)?;
        let texts = prompts.iter().map(|p| self.0.encode_prompt(p)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        let refs: Vec<_> = texts.iter().collect();
        let _g = flowdit::tensor::no_grad();
        self.0.forward(&x, &t, &refs).map(|v| v.to_vec()).map_err(py_err)
    }

    /// Guided Euler sample on a `latent_height × latent_width` grid.
    /// Returns the flat latent and its `[C, H, W]` shape.
    #[pyo3(signature = (prompt, latent_height, latent_width, steps = 50, cfg_scale = 5.0, seed = 0, negative_prompt = ""))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        prompt: &str,
        latent_height: usize,
        latent_width: usize,
        steps: usize,
        cfg_scale: f64,
        seed: u64,
        negative_prompt: &str,
    ) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let text = self.0.encode_prompt(prompt).map_err(py_err)?;
        let uncond = self.0.encode_prompt(negative_prompt).map_err(py_err)?;
        let shape = vec![self.0.config.latent_channels, latent_height, latent_width];
        let cfg = SamplerConfig { steps, cfg_scale, seed };
        let out = sample(&self.0, &text, &uncond, &shape, &cfg).map_err(py_err)?;
        Ok((out.to_vec(), shape))
    }
}

#[pyfunction]
fn quality_tag(score: f64) -> PyResult<String> {
    score_bucket(score).map(|t| t.to_string()).map_err(py_err)
}

/// `(width, height)` after the stage's resize and crop, or `None` when the
/// image is skipped.
#[pyfunction]
#[pyo3(signature = (width, height, stage, seed = 0))]
fn resize_plan(width: u32, height: u32, stage: u8, seed: u64) -> PyResult<Option<(u32, u32)>> {
    let stage = Stage::from_number(stage).map_err(py_err)?;
    let plan = stage_resize(width, height, stage, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
    Ok(match plan {
        ResizePlan::Resize { output, .. } => Some(output),
        ResizePlan::Skip { .. } => None,
    })
}

/// Ids of the representatives left after iterated partitioned clustering.
#[pyfunction]
#[pyo3(signature = (ids, vectors, sim_threshold = 0.9, min_pts = 2, partition_size = 1024, max_rounds = 16, seed = 0))]
fn dedup(
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    sim_threshold: f64,
    min_pts: usize,
    partition_size: usize,
    max_rounds: usize,
    seed: u64,
) -> PyResult<Vec<String>> {
    if ids.len() != vectors.len() {
        return Err(PyValueError::new_err(format!("{} ids for {} vectors", ids.len(), vectors.len())));
    }
    let records = ids
        .into_iter()
        .zip(vectors)
        .map(|(id, v)| EmbeddingRecord::normalized(id, v))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let cfg = DedupConfig { sim_threshold, min_pts, partition_size, max_rounds, seed };
    dedup_converge(&records, &cfg).map(|r| r.representatives).map_err(py_err)
}

/// Runs a training configuration file; returns the run summary.
#[pyfunction]
#[pyo3(signature = (config, output_dir, resume = None))]
fn train(py: Python<'_>, config: PathBuf, output_dir: PathBuf, resume: Option<PathBuf>) -> PyResult<Py<PyAny>> {
    let out = cmd_train(&TrainArgs { config, resume, output_dir }).map_err(py_err)?;
    let value = serde_json::to_value(out).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

#[pymodule]
fn flowdit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDit>()?;
    m.add_function(wrap_pyfunction!(quality_tag, m)?)?;
    m.add_function(wrap_pyfunction!(resize_plan, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
