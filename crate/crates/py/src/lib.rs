//! Python bindings: configuration, synthetic data, training, evaluation and the
//! loss-scheduling primitives.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pyramid_reid::data::{self, CorruptionConfig, GenConfig, Split};
use pyramid_reid::evaluation::{self, Meta, Metrics};
use pyramid_reid::pyramid::{self, BranchMask};
use pyramid_reid::scheduler::{self, Phase, SchedulerConfig, SchedulerState};
use pyramid_reid::losses::Task;
use pyramid_reid::trainer::{self, Checkpoint, Profile, TraceRow, TrainConfig, KEYS};
use pyramid_reid::Error;

create_exception!(pyreid, ReidError, PyException);
create_exception!(pyreid, ConfigError, ReidError);
create_exception!(pyreid, DivergedError, ReidError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::UnknownKey(_) => ConfigError::new_err(msg),
        Error::Diverged { .. } => DivergedError::new_err(msg),
        Error::Io(_) => PyOSError::new_err(msg),
        _ => ReidError::new_err(msg),
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for pyramid_reid::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_mask(mask: Option<&str>) -> PyResult<Option<BranchMask>> {
    mask.map(|m| m.parse::<BranchMask>()).transpose().py()
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().py()
}

fn parse_phase(phase: &str) -> PyResult<Phase> {
    phase.parse().py()
}

fn parse_task(task: &str) -> PyResult<Task> {
    match task {
        "id" => Ok(Task::Id),
        "triplet" => Ok(Task::Triplet),
        other => Err(PyValueError::new_err(format!("unknown task `{other}` (expected id or triplet)"))),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mAP", m.map)?;
    d.set_item("rank1", m.rank1())?;
    d.set_item("rank5", m.rank5())?;
    d.set_item("rank10", m.rank10())?;
    d.set_item("cmc", m.cmc.clone())?;
    Ok(d)
}

fn row_dict<'py>(py: Python<'py>, r: &TraceRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("tau", r.tau)?;
    d.set_item("phase", r.phase.as_str())?;
    d.set_item("l_id", r.l_id)?;
    d.set_item("l_tp", r.l_tp)?;
    d.set_item("k_id", r.k_id)?;
    d.set_item("k_tp", r.k_tp)?;
    d.set_item("p_id", r.p_id)?;
    d.set_item("p_tp", r.p_tp)?;
    d.set_item("fl_id", r.fl_id)?;
    d.set_item("fl_tp", r.fl_tp)?;
    d.set_item("lr", r.lr)?;
    Ok(d)
}

/// Training settings. Values are read and written as strings, exactly as in a config file.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (profile = "desk"))]
    fn new(profile: &str) -> PyResult<Self> {
        let profile: Profile = profile.parse().py()?;
        Ok(PyConfig {
            inner: TrainConfig::profile(profile),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (text, profile = "desk"))]
    fn from_ini(text: &str, profile: &str) -> PyResult<Self> {
        let base = Self::new(profile)?.inner;
        Ok(PyConfig {
            inner: TrainConfig::from_ini(text, base).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, profile = "desk"))]
    fn load(path: PathBuf, profile: &str) -> PyResult<Self> {
        let base = Self::new(profile)?.inner;
        Ok(PyConfig {
            inner: TrainConfig::load(path, base).py()?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        KEYS.to_vec()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).py()
    }

    /// Non-string values are converted with `str()`; booleans become `true`/`false`.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = match value.extract::<bool>() {
            Ok(b) if value.is_instance_of::<pyo3::types::PyBool>() => b.to_string(),
            _ => value.str()?.to_string(),
        };
        self.inner.set(key, &text).py()
    }

    fn __getitem__(&self, key: &str) -> PyResult<String> {
        self.get(key)
    }

    fn __setitem__(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.set(key, value)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_ini(&self) -> String {
        self.inner.to_ini()
    }

    fn __eq__(&self, other: &PyConfig) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(parts={}, feature_dim={}, epochs={}, seed={}, pyramid_mask={})",
            self.inner.parts, self.inner.feature_dim, self.inner.epochs, self.inner.seed, self.inner.pyramid_mask
        )
    }
}

/// Synthetic re-identification images split into train, query and gallery.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed = 1, severity = 0.0, ids = 40, images_per_id = 10, cameras = 2, height = 48, width = 16))]
    fn generate(
        seed: u64,
        severity: f64,
        ids: usize,
        images_per_id: usize,
        cameras: usize,
        height: usize,
        width: usize,
    ) -> PyResult<Self> {
        let gen = GenConfig {
            num_ids: ids,
            imgs_per_id: images_per_id,
            num_cams: cameras,
            height,
            width,
        };
        Ok(PyDataset {
            inner: data::generate_dataset(&gen, &CorruptionConfig { severity }, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_dataset(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| PyOSError::new_err(e.to_string()))?;
        data::save_dataset(&self.inner, path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(channels, height, width)`.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        self.inner.image_shape()
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(parse_split(split)?).len())
    }

    /// `(identity, camera)` per image.
    fn labels(&self, split: &str) -> PyResult<Vec<(usize, usize)>> {
        let set = self.inner.split(parse_split(split)?);
        Ok(set.records.iter().map(|r| (r.identity, r.camera)).collect())
    }

    /// Flat row-major pixels with their `[N, C, H, W]` shape.
    fn images(&self, split: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = &self.inner.split(parse_split(split)?).images;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }
}

#[pyclass(name = "Trainer", unsendable)]
pub struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: trainer::Trainer::new(config.inner.clone(), &dataset.inner).py()?,
        })
    }

    #[staticmethod]
    fn resume(config: &PyConfig, dataset: &PyDataset, checkpoint: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(checkpoint).py()?;
        Ok(PyTrainer {
            inner: trainer::Trainer::resume(config.inner.clone(), &dataset.inner, &ckpt).py()?,
        })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch()
    }

    #[getter]
    fn iterations_per_epoch(&self) -> u64 {
        self.inner.iterations_per_epoch()
    }

    #[getter]
    fn is_finished(&self) -> bool {
        self.inner.is_finished()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config().clone(),
        }
    }

    /// One iteration; returns its trace row.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let row = self.inner.step().py()?;
        row_dict(py, &row)
    }

    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = self.inner.run_epoch().py()?;
        rows.iter().map(|r| row_dict(py, r)).collect()
    }

    /// Trains until the configured epoch count is reached.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let rows = self.inner.run().py()?;
        rows.iter().map(|r| row_dict(py, r)).collect()
    }

    fn evaluate<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.evaluate(&dataset.inner).py()?;
        metrics_dict(py, &m)
    }

    /// Embeddings of one split as `(rows, dim)` flat data.
    #[pyo3(signature = (dataset, split, mask = None))]
    fn embed(&mut self, dataset: &PyDataset, split: &str, mask: Option<&str>) -> PyResult<(Vec<f64>, usize)> {
        let mask = parse_mask(mask)?.unwrap_or_else(|| self.inner.config().pyramid_mask.clone());
        let images = &dataset.inner.split(parse_split(split)?).images;
        evaluation::embed_rows(self.inner.model_mut(), images, &mask).py()
    }

    fn checkpoint_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.checkpoint().and_then(|c| c.to_bytes()).py()?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().and_then(|c| c.save(path)).py()
    }
}

/// The dynamic loss scheduler on its own, fed with loss values by hand.
#[pyclass(name = "Scheduler", from_py_object)]
#[derive(Clone)]
pub struct PyScheduler {
    inner: SchedulerState,
}

#[pymethods]
impl PyScheduler {
    #[new]
    #[pyo3(signature = (alpha = 0.25, gamma = 2.0, switch_ratio = 0.16))]
    fn new(alpha: f64, gamma: f64, switch_ratio: f64) -> PyResult<Self> {
        let cfg = SchedulerConfig {
            alpha,
            gamma,
            switch_ratio,
        };
        Ok(PyScheduler {
            inner: SchedulerState::new(cfg).py()?,
        })
    }

    /// Picks and returns the phase for the coming iteration.
    fn decide(&mut self) -> &'static str {
        self.inner.decide().as_str()
    }

    /// `task` is `"id"` or `"triplet"`.
    fn observe(&mut self, task: &str, loss: f64) -> PyResult<()> {
        self.inner.observe(parse_task(task)?, loss).py()
    }

    fn advance(&mut self) {
        self.inner.advance()
    }

    #[getter]
    fn phase(&self) -> &'static str {
        self.inner.phase.as_str()
    }

    #[getter]
    fn tau(&self) -> u64 {
        self.inner.tau
    }

    /// `(fl_id, fl_tp)`.
    #[getter]
    fn weights(&self) -> (f64, f64) {
        self.inner.weights()
    }

    /// `(k_prev, k, p, fl)` for one task.
    fn track(&self, task: &str) -> PyResult<(f64, f64, f64, f64)> {
        let t = self.inner.track(parse_task(task)?);
        Ok((t.k_prev, t.k, t.p, t.fl))
    }
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, mask = None))]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    dataset: &PyDataset,
    mask: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let ckpt = Checkpoint::load(checkpoint).py()?;
    let mask = parse_mask(mask)?;
    let m = trainer::evaluate_checkpoint(&ckpt, &dataset.inner, mask.as_ref()).py()?;
    metrics_dict(py, &m)
}

/// Ranks `gallery` for every query and returns mAP and CMC. Rows are lists of equal length;
/// metadata are `(identity, camera)` pairs.
#[pyfunction]
#[pyo3(signature = (queries, query_meta, gallery, gallery_meta, normalize = false))]
fn evaluate_embeddings<'py>(
    py: Python<'py>,
    queries: Vec<Vec<f64>>,
    query_meta: Vec<(usize, usize)>,
    gallery: Vec<Vec<f64>>,
    gallery_meta: Vec<(usize, usize)>,
    normalize: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let dim = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if queries.iter().chain(&gallery).any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("all embedding rows must have the same length"));
    }
    let meta = |v: Vec<(usize, usize)>| -> Vec<Meta> {
        v.into_iter().map(|(identity, camera)| Meta { identity, camera }).collect()
    };
    let m = evaluation::evaluate_embeddings(
        &queries.concat(),
        &meta(query_meta),
        &gallery.concat(),
        &meta(gallery_meta),
        dim,
        normalize,
    )
    .py()?;
    metrics_dict(py, &m)
}

#[pyfunction]
fn branch_count(levels: usize) -> usize {
    pyramid::branch_count(levels)
}

/// `(level, position, start_row, end_row)` per branch, rows 1-based and inclusive.
#[pyfunction]
fn enumerate_branches(levels: usize, height: usize) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let specs = pyramid::enumerate_branches(levels, height).py()?;
    Ok(specs.iter().map(|s| (s.level, s.position, s.start_row, s.end_row)).collect())
}

#[pyfunction]
fn update_ema(k_prev: f64, loss: f64, alpha: f64) -> PyResult<f64> {
    scheduler::update_ema(k_prev, loss, alpha).py()
}

#[pyfunction]
fn loss_reduction_prob(k: f64, k_prev: f64) -> PyResult<f64> {
    scheduler::loss_reduction_prob(k, k_prev).py()
}

#[pyfunction]
fn focal_weight(p: f64, gamma: f64) -> f64 {
    scheduler::focal_weight(p, gamma)
}

#[pyfunction]
#[pyo3(signature = (fl_id, fl_tp, switch_ratio, previous = "id_only"))]
fn select_phase(fl_id: f64, fl_tp: f64, switch_ratio: f64, previous: &str) -> PyResult<&'static str> {
    Ok(scheduler::select_phase(fl_id, fl_tp, switch_ratio, parse_phase(previous)?).as_str())
}

#[pymodule]
pub fn pyreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ReidError", py.get_type::<ReidError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DivergedError", py.get_type::<DivergedError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyScheduler>()?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(branch_count, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_branches, m)?)?;
    m.add_function(wrap_pyfunction!(update_ema, m)?)?;
    m.add_function(wrap_pyfunction!(loss_reduction_prob, m)?)?;
    m.add_function(wrap_pyfunction!(focal_weight, m)?)?;
    m.add_function(wrap_pyfunction!(select_phase, m)?)?;
    Ok(())
}
