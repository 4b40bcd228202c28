//! Python bindings: configuration, the CLI commands, metrics, and
//! single-image inference with adaptive routing.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use glae::checkpoint::load_checkpoint;
use glae::cli;
use glae::labels::{expected_age, make_label_distribution, AgeLabel};
use glae::metrics::{self, PredictionRecord};
use glae::model::HeadChoice;
use glae::routing::{predict_pair, route_with, KlMode};
use glae::synth::normalize_pixel;
use glae::tensor::Tensor3;
use glae::trainer::Stage;

fn err(e: glae::Error) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e {
        glae::Error::Io { .. } => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

#[pyclass(name = "RunConfig", module = "pyglae", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    inner: glae::config::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, optionally overridden by `key = value` text.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => glae::config::RunConfig::from_text(t).map_err(err)?,
            None => Default::default(),
        };
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: glae::config::RunConfig::load(&path).map_err(err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .entries()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("config: unknown key '{key}'")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

#[pyclass(name = "MetricsReport", module = "pyglae", frozen)]
pub struct PyMetricsReport {
    inner: metrics::MetricsReport,
}

#[pymethods]
impl PyMetricsReport {
    #[getter]
    fn mae(&self) -> f64 {
        self.inner.mae
    }
    #[getter]
    fn cmae(&self) -> f64 {
        self.inner.cmae
    }
    #[getter]
    fn aar(&self) -> f64 {
        self.inner.aar
    }
    #[getter]
    fn sigma_spread(&self) -> f64 {
        self.inner.sigma_spread
    }
    #[getter]
    fn epsilon(&self) -> Option<f64> {
        self.inner.epsilon
    }
    #[getter]
    fn head_cmae(&self) -> Option<f64> {
        self.inner.head_cmae()
    }
    #[getter]
    fn tail_cmae(&self) -> Option<f64> {
        self.inner.tail_cmae()
    }
    #[getter]
    fn per_class_mae(&self) -> Vec<Option<f64>> {
        self.inner.per_class_mae.clone()
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }
    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
    fn __repr__(&self) -> String {
        format!(
            "MetricsReport(n={}, mae={:.4}, cmae={:.4}, aar={:.4})",
            self.inner.n, self.inner.mae, self.inner.cmae, self.inner.aar
        )
    }
}

fn wrap(inner: metrics::MetricsReport) -> PyMetricsReport {
    PyMetricsReport { inner }
}

/// A trained checkpoint loaded for inference.
#[pyclass(name = "Model", module = "pyglae", frozen)]
pub struct PyModel {
    inner: glae::model::Model<f32>,
    stage: u8,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path).map_err(err)?;
        Ok(PyModel {
            stage: ck.stage.number(),
            inner: ck.model,
        })
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.stage
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.backbone.config.input_size
    }

    /// Predicted age of one grey image given as row-major bytes.
    ///
    /// Returns `(age, head, upsilon_vanilla, upsilon_balanced)`; a stage-1
    /// model always answers with the vanilla head and `None` divergences.
    #[pyo3(signature = (pixels, kl = "forward"))]
    fn predict(&self, pixels: Vec<u8>, kl: &str) -> PyResult<(f64, &'static str, Option<f64>, Option<f64>)> {
        let s = self.input_size();
        if pixels.len() != s * s {
            return Err(PyValueError::new_err(format!(
                "shape: expected {} pixels, got {}",
                s * s,
                pixels.len()
            )));
        }
        let img =
            Tensor3::from_vec(1, s, s, pixels.iter().map(|&p| normalize_pixel(p) as f32).collect()).map_err(err)?;
        let (v, vf) = predict_pair(&self.inner, HeadChoice::Vanilla, &img).map_err(err)?;
        if self.inner.balanced.is_none() {
            let age = expected_age(&v.average(&vf).map_err(err)?);
            return Ok((age, "vanilla", None, None));
        }
        let (b, bf) = predict_pair(&self.inner, HeadChoice::Balanced, &img).map_err(err)?;
        let d = route_with(KlMode::parse(kl).map_err(err)?, &v, &vf, &b, &bf).map_err(err)?;
        Ok((
            d.y_hat,
            d.chosen.name(),
            Some(d.upsilon_vanilla),
            Some(d.upsilon_balanced),
        ))
    }
}

/// Gaussian target distribution over ages `0..=max_age`.
#[pyfunction]
#[pyo3(signature = (y, max_age = 100, sigma = 1.0))]
fn label_distribution(y: usize, max_age: usize, sigma: f64) -> PyResult<Vec<f64>> {
    let label = AgeLabel::new(y, max_age).map_err(err)?;
    Ok(make_label_distribution(label, sigma).map_err(err)?.z)
}

/// Channel-to-space rearrangement of a flat `c×h×w` tensor.
#[pyfunction]
fn rearrange(data: Vec<f64>, c: usize, h: usize, w: usize, r: usize) -> PyResult<(Vec<f64>, (usize, usize, usize))> {
    let t = Tensor3::from_vec(c, h, w, data).map_err(err)?;
    let m = glae::rearrange::rearrange(&t, r).map_err(err)?;
    let shape = (m.map.c, m.map.h, m.map.w);
    Ok((m.map.data, shape))
}

fn records(y: Vec<usize>, y_hat: Vec<f64>, sigma: Option<Vec<f64>>) -> PyResult<Vec<PredictionRecord>> {
    if y.len() != y_hat.len() || sigma.as_ref().is_some_and(|s| s.len() != y.len()) {
        return Err(PyValueError::new_err("shape: input lengths differ"));
    }
    Ok(y.into_iter()
        .zip(y_hat)
        .enumerate()
        .map(|(i, (y, p))| {
            let r = PredictionRecord::new(i.to_string(), y, p);
            match &sigma {
                Some(s) => r.with_sigma(s[i]),
                None => r,
            }
        })
        .collect())
}

/// Full metrics report for true ages `y` and predictions `y_hat`.
#[pyfunction]
#[pyo3(signature = (y, y_hat, sigma = None, config = None))]
fn report(
    y: Vec<usize>,
    y_hat: Vec<f64>,
    sigma: Option<Vec<f64>>,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<PyMetricsReport> {
    let protocol = config.map(|c| c.inner.protocol()).unwrap_or_default();
    let r = records(y, y_hat, sigma)?;
    Ok(wrap(metrics::build_report(&r, &protocol).map_err(err)?))
}

#[pyfunction]
fn aar_score(mae: f64, sigma: f64) -> f64 {
    metrics::aar_score(mae, sigma)
}

fn config_or_default(config: Option<PyRef<'_, PyRunConfig>>) -> glae::config::RunConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Renders the synthetic dataset; returns `(n_train, n_test)`.
#[pyfunction]
#[pyo3(signature = (out, config = None))]
fn gen_data(py: Python<'_>, out: PathBuf, config: Option<PyRef<'_, PyRunConfig>>) -> PyResult<(usize, usize)> {
    let cfg = config_or_default(config);
    let s = py.detach(|| cli::cmd_gen_data(&cfg, &out)).map_err(err)?;
    Ok((s.n_train, s.n_test))
}

/// Runs one training stage; returns the checkpoint path.
#[pyfunction]
#[pyo3(signature = (stage, data, out, config = None, init = None))]
fn train(
    py: Python<'_>,
    stage: u8,
    data: PathBuf,
    out: PathBuf,
    config: Option<PyRef<'_, PyRunConfig>>,
    init: Option<PathBuf>,
) -> PyResult<PathBuf> {
    let cfg = config_or_default(config);
    let stage = Stage::from_number(stage).map_err(err)?;
    py.detach(|| cli::cmd_train(&cfg, stage, &data, &out, init.as_deref(), &mut |_| {}))
        .map_err(err)
}

/// Scores every variant on the test split; returns `{policy: MetricsReport}`.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, out, config = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    config: Option<PyRef<'_, PyRunConfig>>,
) -> PyResult<Vec<(String, PyMetricsReport)>> {
    let cfg = match config {
        Some(c) => c.inner.clone(),
        None => {
            let ck = load_checkpoint::<f32>(&checkpoint).map_err(err)?;
            cli::embedded_config(&ck).map_err(err)?.unwrap_or_default()
        }
    };
    let ev = py
        .detach(|| cli::cmd_evaluate(&cfg, &checkpoint, &data, &out))
        .map_err(err)?;
    Ok(ev
        .variants
        .into_iter()
        .map(|v| (v.policy.name().to_string(), wrap(v.report)))
        .collect())
}

/// Metrics for a prediction CSV.
#[pyfunction]
#[pyo3(signature = (predictions, config = None))]
fn score(predictions: PathBuf, config: Option<PyRef<'_, PyRunConfig>>) -> PyResult<PyMetricsReport> {
    let cfg = config_or_default(config);
    Ok(wrap(cli::cmd_score(&cfg, &predictions, None).map_err(err)?))
}

#[pymodule]
fn pyglae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyMetricsReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(label_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(rearrange, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(aar_score, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
