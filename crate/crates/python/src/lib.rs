use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use vitsplit::config::RunConfig;
use vitsplit::data::{synthesize, Dataset as CoreDataset, SyntheticSpec};
use vitsplit::ensemble::Ensemble as CoreEnsemble;
use vitsplit::persist::{self, Container, Payload};
use vitsplit::rng::{derive_seed as core_derive_seed, Stage};
use vitsplit::sim::{self, DeploymentPlan, DeviceProfile, NetworkModel, SimReport};
use vitsplit::train::{accuracy, argmax_rows};
use vitsplit::vit::{count_flops, count_params, ViTConfig};
use vitsplit::{pipeline, Error};

create_exception!(vitsplit_py, VitsplitError, PyException, "Raised for any failure inside vitsplit.");

fn err(e: Error) -> PyErr {
    VitsplitError::new_err((e.category(), e.exit_code(), e.to_string()))
}

fn toml_to_py(py: Python<'_>, v: &toml::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        toml::Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Boolean(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        toml::Value::Datetime(d) => d.to_string().into_pyobject(py)?.into_any().unbind(),
        toml::Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(toml_to_py(py, x)?)?;
            }
            l.into_any().unbind()
        }
        toml::Value::Table(t) => {
            let d = PyDict::new(py);
            for (k, x) in t {
                d.set_item(k, toml_to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

/// Serializes through TOML so Python sees the same keys as the files on disk.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = toml::Value::try_from(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    toml_to_py(py, &v)
}

fn parse_stage(name: &str) -> PyResult<Stage> {
    Ok(match name {
        "ingest" => Stage::Ingest,
        "partition" => Stage::Partition,
        "teacher" => Stage::Teacher,
        "shrink" => Stage::Shrink,
        "distill" => Stage::Distill,
        "ensemble" => Stage::Ensemble,
        "simulate" => Stage::Simulate,
        _ => return Err(PyValueError::new_err(format!("unknown stage {name:?}"))),
    })
}

fn split_indices(data: &CoreDataset, split: &str) -> PyResult<Vec<usize>> {
    let s = data.split();
    Ok(match split {
        "train" => s.train,
        "val" => s.val,
        "test" => s.test,
        "all" => (0..data.len()).collect(),
        _ => return Err(PyValueError::new_err(format!("split must be train, val, test or all, not {split:?}"))),
    })
}

/// Seed of record `index` in `stage`, derived from the master seed.
#[pyfunction]
fn derive_seed(master: u64, stage: &str, index: u64) -> PyResult<u64> {
    Ok(core_derive_seed(master, parse_stage(stage)?, index))
}

/// Effective run configuration as a dict, after applying `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (path=None, overrides=Vec::new()))]
fn load_config(py: Python<'_>, path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Py<PyAny>> {
    let cfg = RunConfig::load(path.as_deref(), &overrides).map_err(err)?;
    to_py(py, &cfg)
}

/// Runs one pipeline stage, or `pipeline` for all of them. `report` and
/// `pipeline` return the run summary; other stages return None.
#[pyfunction]
#[pyo3(signature = (stage, config=None, overrides=Vec::new(), force=false))]
fn run_stage(
    py: Python<'_>,
    stage: &str,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    force: bool,
) -> PyResult<Option<Py<PyAny>>> {
    let cfg = RunConfig::load(config.as_deref(), &overrides).map_err(err)?;
    let summary = py
        .detach(|| -> vitsplit::Result<Option<pipeline::Summary>> {
            match stage {
                "ingest" => pipeline::ingest(&cfg, force).map(|_| None),
                "partition" => pipeline::partition(&cfg, force).map(|_| None),
                "train-teacher" => pipeline::train_teacher(&cfg, force).map(|_| None),
                "shrink" => pipeline::shrink_stage(&cfg, force).map(|_| None),
                "distill" => pipeline::distill(&cfg, force).map(|_| None),
                "ensemble" => pipeline::ensemble(&cfg, force).map(|_| None),
                "simulate" => pipeline::simulate(&cfg, force).map(|_| None),
                "report" => pipeline::report(&cfg, force).map(Some),
                "pipeline" => pipeline::run_all(&cfg, force).map(Some),
                _ => Err(Error::config(format!("unknown stage {stage:?}"))),
            }
        })
        .map_err(err)?;
    summary.map(|s| to_py(py, &s)).transpose()
}

/// Tag, metadata and entry listing of a container file, without decoding tensors.
#[pyfunction]
fn inspect(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let c = Container::read(&path, None).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("tag", &c.tag)?;
    let meta: toml::Value = toml::from_str(&c.meta).map_err(|e| PyValueError::new_err(e.to_string()))?;
    d.set_item("meta", toml_to_py(py, &meta)?)?;
    let entries = PyList::empty(py);
    for e in &c.entries {
        let dtype = match e.payload {
            Payload::F32(_) => "f32",
            Payload::U8(_) => "u8",
            Payload::U32(_) => "u32",
        };
        entries.append((e.name.as_str(), dtype, e.dims.clone()))?;
    }
    d.set_item("entries", entries)?;
    Ok(d.into_any().unbind())
}

/// Architecture of a ViT.
#[pyclass(module = "vitsplit_py", name = "ViTConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyViTConfig(ViTConfig);

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_side, patch_size, channels, layers, embed_dim, heads, mlp_dim, num_classes, head_dim=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_side: usize,
        patch_size: usize,
        channels: usize,
        layers: usize,
        embed_dim: usize,
        heads: usize,
        mlp_dim: usize,
        num_classes: usize,
        head_dim: Option<usize>,
    ) -> PyResult<Self> {
        let c = ViTConfig { image_side, patch_size, channels, layers, embed_dim, heads, mlp_dim, num_classes, head_dim };
        c.validate().map_err(err)?;
        Ok(PyViTConfig(c))
    }

    #[staticmethod]
    fn vit_l16() -> Self {
        PyViTConfig(ViTConfig::vit_l16())
    }

    #[staticmethod]
    fn deit_b() -> Self {
        PyViTConfig(ViTConfig::deit_b())
    }

    #[staticmethod]
    fn decomposed_small() -> Self {
        PyViTConfig(ViTConfig::decomposed_small())
    }

    fn param_count(&self) -> u64 {
        count_params(&self.0)
    }

    fn flops(&self) -> u64 {
        count_flops(&self.0)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!(
            "ViTConfig(image_side={}, patch_size={}, layers={}, embed_dim={}, heads={}, mlp_dim={}, num_classes={})",
            c.image_side, c.patch_size, c.layers, c.embed_dim, c.heads, c.mlp_dim, c.num_classes
        )
    }
}

/// Labeled u8 images.
#[pyclass(module = "vitsplit_py", name = "Dataset")]
struct PyDataset(CoreDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        persist::load_dataset(&path).map(PyDataset).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes=8, per_class=50, side=16, channels=1, seed=7, noise=0.08))]
    fn synthetic(num_classes: usize, per_class: usize, side: usize, channels: usize, seed: u64, noise: f32) -> PyResult<Self> {
        let spec = SyntheticSpec { num_classes, per_class, side, channels, seed, noise };
        synthesize(&spec).map(PyDataset).map_err(err)
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        persist::save_dataset(&path, &self.0, force).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn side(&self) -> usize {
        self.0.side
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.0.labels.clone()
    }

    /// Raw pixels of record `i`, channel-major.
    fn image(&self, i: usize) -> PyResult<Vec<u8>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err(format!("record {i} out of range")));
        }
        Ok(self.0.image(i).to_vec())
    }

    fn split(&self, which: &str) -> PyResult<Vec<usize>> {
        split_indices(&self.0, which)
    }

    fn class_counts(&self) -> Vec<usize> {
        self.0.class_counts()
    }
}

/// One ViT with weights.
#[pyclass(module = "vitsplit_py", name = "Model")]
struct PyModel(vitsplit::vit::ViTModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        persist::load_model(&path).map(PyModel).map_err(err)
    }

    #[staticmethod]
    fn init(config: &PyViTConfig, seed: u64) -> PyResult<Self> {
        vitsplit::vit::ViTModel::init(&config.0, seed).map(PyModel).map_err(err)
    }

    #[pyo3(signature = (path, force=false))]
    fn save(&self, path: PathBuf, force: bool) -> PyResult<()> {
        persist::save_model(&path, &self.0, force).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyViTConfig {
        PyViTConfig(self.0.config.clone())
    }

    fn param_count(&self) -> u64 {
        self.0.param_count()
    }

    /// Class logits for the selected records, one row per record.
    fn logits(&self, py: Python<'_>, data: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        py.detach(|| {
            let x = data.0.images(&indices)?;
            let l = self.0.logits(&x)?;
            let k = l.shape()[1];
            Ok(l.data().chunks(k).map(<[f32]>::to_vec).collect())
        })
        .map_err(err)
    }

    fn predict(&self, py: Python<'_>, data: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<usize>> {
        py.detach(|| data.0.images(&indices).and_then(|x| self.0.logits(&x)).map(|l| argmax_rows(&l)))
            .map_err(err)
    }

    #[pyo3(signature = (data, split="test", batch_size=64))]
    fn accuracy(&self, py: Python<'_>, data: &PyDataset, split: &str, batch_size: usize) -> PyResult<f64> {
        let idx = split_indices(&data.0, split)?;
        py.detach(|| accuracy(&self.0, &data.0, &idx, batch_size)).map_err(err)
    }
}

/// Small models plus the aggregation module and head.
#[pyclass(module = "vitsplit_py", name = "Ensemble")]
struct PyEnsemble(CoreEnsemble);

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        persist::load_ensemble(&path).map(PyEnsemble).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.smalls.len()
    }

    #[pyo3(signature = (with_token_map=false))]
    fn param_count(&self, with_token_map: bool) -> u64 {
        self.0.param_count(with_token_map)
    }

    fn predict(&self, py: Python<'_>, data: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<usize>> {
        py.detach(|| vitsplit::ensemble::ensemble_predict(&self.0, &data.0, &indices, 64)).map_err(err)
    }

    #[pyo3(signature = (data, split="test", batch_size=64))]
    fn accuracy(&self, py: Python<'_>, data: &PyDataset, split: &str, batch_size: usize) -> PyResult<f64> {
        let idx = split_indices(&data.0, split)?;
        let v = py.detach(|| vitsplit::ensemble::evaluate_ensemble(&self.0, &data.0, &idx, batch_size)).map_err(err)?;
        Ok(v.accuracy)
    }
}

/// A device preset as a dict: name, memory_bytes, throughput_flops, power_active_w, power_idle_w.
#[pyfunction]
fn device_preset(py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
    let d = DeviceProfile::preset(name).ok_or_else(|| PyValueError::new_err(format!("unknown device {name:?}")))?;
    to_py(py, &d)
}

/// Compute time of one model on a device and transfer time of its payload.
#[pyfunction]
#[pyo3(signature = (model_flops, device, payload_bytes, bandwidth_bytes_per_s, latency_s=0.0))]
fn estimate_latency(
    py: Python<'_>,
    model_flops: u64,
    device: &str,
    payload_bytes: u64,
    bandwidth_bytes_per_s: f64,
    latency_s: f64,
) -> PyResult<Py<PyAny>> {
    let d = DeviceProfile::preset(device).ok_or_else(|| PyValueError::new_err(format!("unknown device {device:?}")))?;
    let net = NetworkModel::new(bandwidth_bytes_per_s, latency_s);
    net.validate().map_err(err)?;
    let t = sim::estimate_latency(model_flops, &d, payload_bytes, &net);
    let out = PyDict::new(py);
    out.set_item("compute_s", t.compute_s)?;
    out.set_item("transfer_s", t.transfer_s)?;
    Ok(out.into_any().unbind())
}

/// Simulates a deployment plan given as TOML text and returns the report.
#[pyfunction]
fn simulate_plan(py: Python<'_>, plan_toml: &str) -> PyResult<Py<PyAny>> {
    let plan: DeploymentPlan = toml::from_str(plan_toml).map_err(|e| err(Error::config(e.to_string())))?;
    let report = sim::simulate_inference(&plan, None).map_err(err)?;
    to_py(py, &report)
}

/// Compares report files; the first is the baseline.
#[pyfunction]
fn compare_reports(py: Python<'_>, paths: Vec<PathBuf>) -> PyResult<Py<PyAny>> {
    let reports = paths
        .iter()
        .map(|p| persist::read_toml::<SimReport>(p))
        .collect::<vitsplit::Result<Vec<_>>>()
        .map_err(err)?;
    let c = sim::compare_plans(&reports).map_err(err)?;
    to_py(py, &c)
}

#[pymodule]
fn vitsplit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VitsplitError", m.py().get_type::<VitsplitError>())?;
    m.add("SCHEMA_VERSION", sim::SCHEMA_VERSION)?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(inspect, m)?)?;
    m.add_function(wrap_pyfunction!(device_preset, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_latency, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_plan, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    Ok(())
}
