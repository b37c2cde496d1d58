//! Python bindings: datasets, split classifiers, training, attacks,
//! channel distillation and the experiment pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

use robust_proxy::attack::{evaluate as evaluate_attack, AttackConfig, AttackKind};
use robust_proxy::data::{make_synthetic_split, Dataset as CoreDataset, Split, SyntheticSpec};
use robust_proxy::distill::{distill_masks as core_distill, estimate_channel_profile, DistillConfig};
use robust_proxy::harness::{render_report, write_report, ExperimentConfig, Pipeline, Stage};
use robust_proxy::model::{load_checkpoint, save_checkpoint};
use robust_proxy::proxy::pooled_features;
use robust_proxy::train::{pretrain as core_pretrain, ATMethod, Objective, TrainConfig};
use robust_proxy::{Architecture, SplitClassifier, Tensor};

fn err(e: robust_proxy::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Deserializes an optional dict through JSON so partial configs fill in defaults.
fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    match d {
        None => Ok(T::default()),
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

/// An image dataset with labels in `0..num_classes`.
#[pyclass(module = "robust_proxy_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Procedural dataset of class templates plus Gaussian noise.
    #[staticmethod]
    #[pyo3(signature = (split = "train", seed = 0, spec = None))]
    fn synthetic(py: Python<'_>, split: &str, seed: u64, spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut s = SyntheticSpec::desk_default(seed);
        if let Some(d) = spec {
            let mut merged = serde_json::to_value(&s).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            let patch: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            if let (Some(m), Some(p)) = (merged.as_object_mut(), patch.as_object()) {
                for (k, v) in p {
                    m.insert(k.clone(), v.clone());
                }
            }
            s = serde_json::from_value(merged).map_err(|e| PyValueError::new_err(e.to_string()))?;
        }
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        Ok(Self {
            inner: make_synthetic_split(&s, split).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// Pixels as a flat row-major list of `len × c × h × w` values.
    fn pixels(&self) -> Vec<f64> {
        self.inner.images().data().to_vec()
    }

    fn take(&self, n: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.take(n).map_err(err)?,
        })
    }
}

/// Convolutional classifier split at its last convolution.
#[pyclass(module = "robust_proxy_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: SplitClassifier,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (input_shape = [3, 16, 16], num_classes = 10, widths = [8, 16, 16, 32], seed = 0))]
    fn new(input_shape: [usize; 3], num_classes: usize, widths: [usize; 4], seed: u64) -> PyResult<Self> {
        let arch = Architecture::with_widths(input_shape, num_classes, widths);
        Ok(Self {
            inner: SplitClassifier::new(arch, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn tap_channels(&self) -> usize {
        self.inner.tap_channels()
    }

    #[getter]
    fn param_version(&self) -> u64 {
        self.inner.param_version()
    }

    fn descriptor(&self) -> String {
        self.inner.architecture().descriptor()
    }

    /// Logits for a flat batch of pixels, returned flat as `n × classes`.
    fn logits(&self, pixels: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
        let [c, h, w] = self.inner.input_shape();
        let x = tensor(pixels, vec![n, c, h, w])?;
        Ok(self.inner.forward(&x).map_err(err)?.data().to_vec())
    }

    fn predict(&self, dataset: &Dataset) -> PyResult<Vec<usize>> {
        self.inner.predict(dataset.inner.images()).map_err(err)
    }

    /// Spatially pooled tap features, one row per image.
    fn pooled_features(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let f = pooled_features(&self.inner, dataset.inner.images()).map_err(err)?;
        let c = f.shape()[1];
        Ok(f.data().chunks(c).map(|r| r.to_vec()).collect())
    }
}

fn at_method(name: &str) -> PyResult<ATMethod> {
    match name {
        "madry" => Ok(ATMethod::Madry),
        "trades" => Ok(ATMethod::trades()),
        "mart" => Ok(ATMethod::mart()),
        other => Err(PyValueError::new_err(format!("unknown training method {other:?}"))),
    }
}

/// Trains a copy of `model` and returns it with the per-epoch history as JSON.
#[pyfunction]
#[pyo3(signature = (model, train, method = "madry", config = None))]
fn pretrain(
    py: Python<'_>,
    model: &Model,
    train: &Dataset,
    method: &str,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, String)> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let objective = match method {
        "standard" => Objective::Standard,
        m => Objective::Adversarial(at_method(m)?),
    };
    let (m, history) = core_pretrain(model.inner.clone(), &train.inner, None, &objective, &cfg).map_err(err)?;
    let history = serde_json::to_string(&history).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((Model { inner: m }, history))
}

/// Accuracy under `clean`, `fgsm`, `pgd` or `cw`.
#[pyfunction]
#[pyo3(signature = (model, dataset, attack = "pgd", epsilon = 8.0 / 255.0, steps = 20, chunk = 128))]
fn evaluate(model: &Model, dataset: &Dataset, attack: &str, epsilon: f64, steps: usize, chunk: usize) -> PyResult<f64> {
    let kind = match attack {
        "clean" => AttackKind::Clean,
        "fgsm" => AttackKind::Fgsm { epsilon },
        "pgd" => AttackKind::Pgd(AttackConfig::linf(epsilon, steps)),
        "cw" => AttackKind::CwLinf(AttackConfig::linf(epsilon, steps)),
        other => return Err(PyValueError::new_err(format!("unknown attack {other:?}"))),
    };
    Ok(evaluate_attack(&model.inner, &dataset.inner, &kind, chunk).map_err(err)?.accuracy)
}

/// Per-image channel masks as bitmaps, `1` marking a robust channel.
#[pyfunction]
#[pyo3(signature = (model, dataset, reference = None, config = None))]
fn distill_masks(
    py: Python<'_>,
    model: &Model,
    dataset: &Dataset,
    reference: Option<&Dataset>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<String>> {
    let cfg: DistillConfig = from_dict(py, config)?;
    let reference = reference.unwrap_or(dataset);
    let profile = estimate_channel_profile(&model.inner, &[reference.inner.all()]).map_err(err)?;
    let batch = dataset.inner.all();
    let set = core_distill(&model.inner, &batch, &profile, &cfg).map_err(err)?;
    let masks = set.for_ids(&batch.ids).map_err(err)?;
    Ok(masks.iter().map(|m| m.bitmap()).collect())
}

/// A cached, stage-addressed experiment driven by a TOML config.
#[pyclass(module = "robust_proxy_py", unsendable)]
pub struct Experiment {
    inner: Pipeline,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config, output_dir = None, seed = None, resume = false))]
    fn new(config: PathBuf, output_dir: Option<PathBuf>, seed: Option<u64>, resume: bool) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::load(&config).map_err(err)?;
        if let Some(o) = output_dir {
            cfg.output_dir = o;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: Pipeline::new(cfg, resume).map_err(err)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config().hash()
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir().to_path_buf()
    }

    /// Runs `stage` and everything upstream; returns `{stage: cached}`.
    fn run_to(&mut self, stage: &str) -> PyResult<Vec<(String, bool)>> {
        let s = Stage::ALL
            .into_iter()
            .find(|s| s.name() == stage)
            .ok_or_else(|| PyValueError::new_err(format!("unknown stage {stage:?}")))?;
        self.inner.run_to(s).map_err(err)?;
        Ok(self
            .inner
            .records()
            .values()
            .map(|r| (r.stage.name().to_string(), r.cached))
            .collect())
    }

    /// Runs every stage and writes the report; returns its text.
    fn run(&mut self) -> PyResult<String> {
        self.inner.run_all().map_err(err)?;
        let report = write_report(&self.inner).map_err(err)?;
        Ok(render_report(&report))
    }

    /// A model produced by the pipeline: standard, surrogate, adversarial or proxy.
    fn model(&self, name: &str) -> PyResult<Model> {
        Ok(Model {
            inner: self.inner.model(name).map_err(err)?,
        })
    }
}

#[pymodule]
fn robust_proxy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(distill_masks, m)?)?;
    Ok(())
}
