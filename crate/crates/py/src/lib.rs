use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sparsenav_core::model::{self, ArchitectureConfig, ModelGraph, SegMask};
use sparsenav_core::navpipe::{self, Frame, NavConfig, PartitionConfidence};
use sparsenav_core::pruner::{self, KScoreTable, PruneMethod};
use sparsenav_core::{eval, profiler, scenegen, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::ProfilerBusy | Error::Json(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn mask(classes: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<SegMask> {
    SegMask::new(height, width, classes, num_classes).map_err(py_err)
}

fn table(entries: Vec<(usize, usize, f64)>) -> PyResult<KScoreTable> {
    KScoreTable::from_entries(entries).map_err(py_err)
}

/// Segmentation model. Images are flat `3*H*W` float lists in CHW order.
#[pyclass(name = "Model", module = "sparsenav")]
struct PyModel {
    inner: ModelGraph,
}

impl PyModel {
    fn image(&self, data: Vec<f32>) -> PyResult<Tensor> {
        let c = &self.inner.config;
        Tensor::new(vec![3, c.input_height, c.input_width], data).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (seed=0, tiny=false))]
    fn build(seed: u64, tiny: bool) -> PyResult<Self> {
        let cfg = if tiny {
            ArchitectureConfig::tiny(seed)
        } else {
            ArchitectureConfig::with_seed(seed)
        };
        Ok(Self {
            inner: model::build_toyformer(&cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_model(path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: model::model_from_bytes(data).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_model(&self.inner, path).map_err(py_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        model::model_to_bytes(&self.inner).map_err(py_err)
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        (self.inner.config.input_height, self.inner.config.input_width)
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn prunable_param_count(&self) -> usize {
        self.inner.prunable_param_count()
    }

    /// Logits as `(flat data, shape)`.
    fn forward(&self, image: Vec<f32>) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let out = self.inner.forward(&self.image(image)?, false).map_err(py_err)?;
        let shape = out.logits.shape().to_vec();
        Ok((out.logits.into_data(), shape))
    }

    /// Per-pixel class ids, row-major.
    fn predict(&self, image: Vec<f32>) -> PyResult<Vec<u8>> {
        let m = self.inner.predict(&self.image(image)?).map_err(py_err)?;
        Ok(m.classes().to_vec())
    }

    /// `(block, latency_ms, params, prunable_params)` per block.
    #[pyo3(signature = (reps=20, warmup=3, seed=0))]
    fn profile(&self, reps: usize, warmup: usize, seed: u64) -> PyResult<Vec<(usize, f64, usize, usize)>> {
        let (h, w) = self.input_size();
        let probe = scenegen::calibration_set(seed, 1, h, w).map_err(py_err)?;
        let prof = profiler::profile_model(&self.inner, &probe[0], reps, warmup).map_err(py_err)?;
        Ok(prof
            .blocks
            .into_iter()
            .map(|b| (b.block, b.latency_ms, b.param_count, b.prunable_params))
            .collect())
    }

    /// Prunes a copy at global ratio `ratio`. Block latencies are measured
    /// unless given. Returns the pruned model and the audit as JSON.
    #[pyo3(signature = (ratio, method="disha", seed=0, calib=8, latencies=None))]
    fn prune(
        &self,
        ratio: f64,
        method: &str,
        seed: u64,
        calib: usize,
        latencies: Option<Vec<f64>>,
    ) -> PyResult<(PyModel, String)> {
        let method: PruneMethod = method.parse().map_err(py_err)?;
        let (h, w) = self.input_size();
        let calib = scenegen::calibration_set(seed, calib, h, w).map_err(py_err)?;
        let blocks = match latencies {
            Some(lat) => {
                if lat.len() != self.inner.num_blocks() {
                    return Err(PyValueError::new_err(format!(
                        "expected {} latencies, got {}",
                        self.inner.num_blocks(),
                        lat.len()
                    )));
                }
                self.inner
                    .blocks
                    .iter()
                    .zip(lat)
                    .enumerate()
                    .map(|(i, (b, l))| profiler::BlockProfile {
                        block: i + 1,
                        latency_ms: l,
                        latency_stddev_ms: 0.0,
                        param_count: b.param_count(),
                        prunable_params: b.prunable_param_count(),
                    })
                    .collect()
            }
            None => {
                let probe = calib.first().ok_or_else(|| PyValueError::new_err("calib must be positive"))?;
                profiler::profile_model(&self.inner, probe, 20, 3).map_err(py_err)?.blocks
            }
        };
        let out = pruner::prune_model(&self.inner, &blocks, &calib, ratio, method, seed).map_err(py_err)?;
        let audit = serde_json::to_string(&out.audit).map_err(|e| py_err(e.into()))?;
        Ok((PyModel { inner: out.model }, audit))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(blocks={}, params={}, input={:?})",
            self.inner.num_blocks(),
            self.inner.param_count(),
            self.input_size()
        )
    }
}

/// One processed frame.
#[pyclass(name = "NavEvent", module = "sparsenav", get_all)]
struct PyNavEvent {
    frame: usize,
    confidence: Option<(f64, f64, f64)>,
    raw: Option<String>,
    direction: Option<String>,
    cue: Option<String>,
    log_line: String,
}

impl From<navpipe::NavEvent> for PyNavEvent {
    fn from(e: navpipe::NavEvent) -> Self {
        Self {
            log_line: e.log_line(),
            frame: e.frame,
            confidence: e.confidence.map(|c| (c.left, c.center, c.right)),
            raw: e.raw.map(|d| d.to_string()),
            direction: e.direction.map(|d| d.to_string()),
            cue: e.cue,
        }
    }
}

#[pymethods]
impl PyNavEvent {
    fn __repr__(&self) -> String {
        format!("NavEvent({:?})", self.log_line)
    }
}

/// Majority-voted direction stream.
#[pyclass(name = "Navigator", module = "sparsenav")]
struct PyNavigator {
    inner: navpipe::Navigator,
}

#[pymethods]
impl PyNavigator {
    #[new]
    #[pyo3(signature = (threshold=navpipe::DEFAULT_THRESHOLD, window=navpipe::DEFAULT_WINDOW, walkable=None))]
    fn new(threshold: f64, window: usize, walkable: Option<Vec<u8>>) -> PyResult<Self> {
        let mut config = NavConfig {
            threshold,
            window,
            ..NavConfig::default()
        };
        if let Some(w) = walkable {
            config.walkable_classes = w;
        }
        config.validate(scenegen::NUM_CLASSES).map_err(py_err)?;
        Ok(Self {
            inner: navpipe::Navigator::new(config, None).map_err(py_err)?,
        })
    }

    #[pyo3(signature = (classes, height, width, num_classes=scenegen::NUM_CLASSES))]
    fn step_mask(&mut self, classes: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<PyNavEvent> {
        let m = mask(classes, height, width, num_classes)?;
        Ok(self.inner.step_mask(&m).map_err(py_err)?.into())
    }

    fn step_image(&mut self, model: &PyModel, image: Vec<f32>) -> PyResult<PyNavEvent> {
        let frame = model.image(image).map(Frame::Image).map_err(|e| Error::Config(e.to_string()));
        Ok(self.inner.step(Some(&model.inner), frame).map_err(py_err)?.into())
    }

    /// Records an unreadable frame.
    fn step_failure(&mut self, reason: &str) -> PyNavEvent {
        self.inner.step_failure(&Error::Io(std::io::Error::other(reason.to_string()))).into()
    }
}

#[pyfunction]
fn kscores(entries: Vec<(usize, usize, f64)>) -> PyResult<Vec<f64>> {
    Ok(table(entries)?.blocks.iter().map(|b| b.k_score).collect())
}

/// Per-block ratios for `(block, params, latency_ms)` rows.
#[pyfunction]
fn allocate(p: f64, entries: Vec<(usize, usize, f64)>) -> PyResult<Vec<f64>> {
    let plan = pruner::allocate(p, &table(entries)?).map_err(py_err)?;
    Ok(plan.blocks.iter().map(|b| b.ratio).collect())
}

#[pyfunction]
fn partition_confidence(data: Vec<u8>, height: usize, width: usize) -> PyResult<(f64, f64, f64)> {
    let m = navpipe::WalkableMask::new(height, width, data).map_err(py_err)?;
    let c = navpipe::partition_confidence(&m).map_err(py_err)?;
    Ok((c.left, c.center, c.right))
}

#[pyfunction]
#[pyo3(signature = (left, center, right, threshold=navpipe::DEFAULT_THRESHOLD))]
fn decide_direction(left: f64, center: f64, right: f64, threshold: f64) -> PyResult<String> {
    let conf = PartitionConfidence { left, center, right };
    Ok(navpipe::decide_direction(&conf, threshold).map_err(py_err)?.to_string())
}

/// `(global, per_class)`; classes absent from both masks are `None`.
#[pyfunction]
#[pyo3(signature = (pred, truth, height, width, num_classes=scenegen::NUM_CLASSES))]
fn iou(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let r = eval::iou(&mask(pred, height, width, num_classes)?, &mask(truth, height, width, num_classes)?).map_err(py_err)?;
    Ok((r.global, r.per_class))
}

#[pyfunction]
fn improvement(disha: f64, random: f64) -> Option<f64> {
    eval::improvement(disha, random)
}

#[pyfunction]
#[pyo3(signature = (pruned, unpruned, height, width, num_classes=scenegen::NUM_CLASSES))]
fn fidelity(pruned: Vec<u8>, unpruned: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<f64> {
    eval::fidelity(&mask(pruned, height, width, num_classes)?, &mask(unpruned, height, width, num_classes)?).map_err(py_err)
}

#[pyfunction]
fn battery_hours(avg_power_w: f64, capacity_mah: f64, voltage_v: f64) -> PyResult<f64> {
    profiler::estimate_battery_hours(avg_power_w, capacity_mah, voltage_v).map_err(py_err)
}

/// `(image, classes)` as flat lists for a random scene.
#[pyfunction]
#[pyo3(signature = (seed, size=64))]
fn generate_scene(seed: u64, size: usize) -> PyResult<(Vec<f32>, Vec<u8>)> {
    let (img, m) = scenegen::generate_scene(&scenegen::SceneSpec::random(seed, size, size)).map_err(py_err)?;
    Ok((img.into_data(), m.classes().to_vec()))
}

#[pymodule]
#[pyo3(name = "sparsenav")]
fn sparsenav_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyNavigator>()?;
    m.add_class::<PyNavEvent>()?;
    m.add_function(wrap_pyfunction!(kscores, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(partition_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(decide_direction, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(improvement, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity, m)?)?;
    m.add_function(wrap_pyfunction!(battery_hours, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add("NUM_CLASSES", scenegen::NUM_CLASSES)?;
    Ok(())
}
