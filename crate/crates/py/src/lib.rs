//! Python bindings: noise schedules, forward noising, the five metrics,
//! sampling from a checkpoint and the synthetic data generator.
//!
//! Masks and images travel as flat row-major lists; images are channel-major
//! `[3, h, w]` with values in `[0, 1]`.

use std::path::PathBuf;

use camodiff::checkpoint::Checkpoint;
use camodiff::data_io::{generate_synthetic, SynthConfig};
use camodiff::diffusion::{self, MaskSpace, MaskTensor};
use camodiff::metrics;
use camodiff::model::{ImageBatch, Model};
use camodiff::sampler::{self, EnsembleMode};
use camodiff::schedule;
use camodiff::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Index(_) => PyValueError::new_err(msg),
        Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn mask(data: Vec<f64>, height: usize, width: usize, space: MaskSpace) -> PyResult<MaskTensor> {
    MaskTensor::new(1, height, width, data, space).map_err(to_py)
}

#[pyclass(name = "NoiseSchedule", module = "camodiff_py", frozen)]
pub struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self { inner: schedule::NoiseSchedule::linear(steps, beta_start, beta_end).map_err(to_py)? })
    }

    fn respace(&self, num_steps: usize) -> PyResult<Self> {
        Ok(Self { inner: self.inner.respace(num_steps).map_err(to_py)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.check_t(t).map_err(to_py)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    fn posterior_variances(&self) -> Vec<f64> {
        self.inner.posterior_variances().to_vec()
    }

    /// Parent timestep of every retained step.
    fn original_indices(&self) -> Vec<usize> {
        self.inner.original_indices().to_vec()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __len__(&self) -> usize {
        self.inner.steps()
    }

    fn __repr__(&self) -> String {
        format!("NoiseSchedule(steps={}, respaced={})", self.inner.steps(), self.inner.is_respaced())
    }
}

/// Closed-form forward noising of a `[-1, 1]` mask at timestep `t`.
#[pyfunction]
fn q_sample(schedule: &PySchedule, y0: Vec<f64>, height: usize, width: usize, t: usize, eps: Vec<f64>) -> PyResult<Vec<f64>> {
    let y0 = mask(y0, height, width, MaskSpace::Diffusion)?;
    Ok(diffusion::q_sample(&y0, &[t], &eps, &schedule.inner).map_err(to_py)?.into_data())
}

/// Posterior mean and variance of the previous step given `y0` and `y_t`.
#[pyfunction]
fn q_posterior(schedule: &PySchedule, y0: Vec<f64>, yt: Vec<f64>, height: usize, width: usize, t: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let y0 = mask(y0, height, width, MaskSpace::Diffusion)?;
    let yt = mask(yt, height, width, MaskSpace::Diffusion)?;
    let p = diffusion::q_posterior(&y0, &yt, &[t], &schedule.inner).map_err(to_py)?;
    Ok((p.mean, p.variance))
}

/// All five scores for one prediction (`[0, 1]`) against a binary mask.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: Vec<f64>, gt: Vec<f64>, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
    let pred = mask(pred, height, width, MaskSpace::Probability)?;
    let gt = mask(gt, height, width, MaskSpace::Probability)?;
    scores_dict(py, &metrics::evaluate_pair(&pred, &gt).map_err(to_py)?)
}

fn scores_dict<'py>(py: Python<'py>, s: &metrics::Scores) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("s_alpha", s.s_alpha)?;
    d.set_item("f_w", s.f_w)?;
    d.set_item("f_m", s.f_m)?;
    d.set_item("e_m", s.e_m)?;
    d.set_item("mae", s.mae)?;
    Ok(d)
}

/// Scores every prediction in `pred_dir` against the same-named mask in
/// `gt_dir`. Returns `(mean, per_image, unmatched)`.
#[pyfunction]
#[pyo3(signature = (pred_dir, gt_dir, normalize = true))]
#[allow(clippy::type_complexity)]
fn evaluate_dataset<'py>(
    py: Python<'py>,
    pred_dir: PathBuf,
    gt_dir: PathBuf,
    normalize: bool,
) -> PyResult<(Bound<'py, PyDict>, Vec<(String, Bound<'py, PyDict>)>, Vec<String>)> {
    let report = metrics::evaluate_dataset(&pred_dir, &gt_dir, normalize).map_err(to_py)?;
    let rows = report.per_image.iter().map(|r| Ok((r.name.clone(), scores_dict(py, &r.scores)?))).collect::<PyResult<Vec<_>>>()?;
    Ok((scores_dict(py, &report.mean)?, rows, report.unmatched))
}

/// A trained network restored from a checkpoint file.
#[pyclass(name = "Model", module = "camodiff_py", frozen)]
pub struct PyModel {
    model: Model<f32>,
    schedule: schedule::NoiseSchedule,
    size: (usize, usize),
    step: u64,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let model = ck.to_model().map_err(to_py)?;
        let schedule = ck.config.train.schedule().map_err(to_py)?;
        Ok(Self { model, schedule, size: ck.config.train.image_size, step: ck.step })
    }

    /// Training steps taken before the checkpoint was written.
    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    /// `(height, width)` the network was trained at.
    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.size
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// Probability mask for one image of the training size. `steps=None`
    /// runs the full chain; `ensemble > 1` combines several chains.
    #[pyo3(signature = (image, steps = Some(50), seed = 0, ensemble = 1, majority = false))]
    fn sample(&self, py: Python<'_>, image: Vec<f32>, steps: Option<usize>, seed: u64, ensemble: usize, majority: bool) -> PyResult<Vec<f64>> {
        let (h, w) = self.size;
        let batch = ImageBatch::new(1, h, w, image).map_err(to_py)?;
        let mode = if majority { EnsembleMode::Majority } else { EnsembleMode::Mean };
        let out = py.detach(|| {
            if ensemble > 1 {
                sampler::sample_ensemble(&self.model, &self.schedule, &batch, steps, ensemble, seed, mode)
            } else {
                sampler::sample(&self.model, &self.schedule, &batch, steps, seed, &[]).map(|t| t.final_mask)
            }
        });
        Ok(out.map_err(to_py)?.into_data())
    }

    /// Static (single-shot) mask predicted from the conditioning feature.
    fn static_mask(&self, image: Vec<f32>) -> PyResult<Vec<f64>> {
        let (h, w) = self.size;
        let batch = ImageBatch::new(1, h, w, image).map_err(to_py)?;
        Ok(self.model.condition(&batch).map_err(to_py)?.static_mask.into_data())
    }
}

/// Writes `count` image/mask pairs plus `train.txt`/`test.txt` under `out`.
/// Returns the number of training stems.
#[pyfunction]
#[pyo3(signature = (out, count = 400, size = 64, contrast = 0.35, seed = 7))]
fn synth(py: Python<'_>, out: PathBuf, count: usize, size: usize, contrast: f64, seed: u64) -> PyResult<usize> {
    let cfg = SynthConfig { count, image_size: size, contrast, seed, ..Default::default() };
    let spec = py.detach(|| generate_synthetic(&cfg, &out)).map_err(to_py)?;
    Ok(spec.len())
}

#[pyfunction]
fn version() -> String {
    camodiff::cli::version_line()
}

#[pymodule]
pub fn camodiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(q_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
