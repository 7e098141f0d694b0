//! Python bindings for `ma_core`.
//!
//! Parameters, trajectories and peak reports are wrapped as classes; stats and
//! registries travel as the same JSON text the CLI reads.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use ma_core::curve::{eval_many, FitParams};
use ma_core::explain::shap::explain_pipeline;
use ma_core::features::{build_features, parse_registry, ModelArch, FEATURE_NAMES};
use ma_core::fit::{multistart_fit, FitResult};
use ma_core::lambert::{lambert_w, Branch};
use ma_core::ml::dataset::{LayerParams, ParamDataset, TargetName};
use ma_core::ml::select::{evaluate_and_select, EvalConfig, Evaluation};
use ma_core::ml::Predictor;
use ma_core::peak::{compare_modes, ModeComparison, PeakReport, RegimeLabel, DEFAULT_HORIZON};
use ma_core::stats::{
    compute_layer_stats, detect_massive, ingest_stats_lines, read_raw_tensor, write_raw_tensor, ActivationTensor,
    StatsRecord, DEFAULT_THRESHOLD, DEFAULT_TOP_K,
};
use ma_core::trajectory::{build_trajectory, gen_synthetic, trajectory_keys, LayerTrajectory, TrajectoryPoint};
use ma_core::MaError;

fn err(e: MaError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "FitParams", module = "ma_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyFitParams(pub FitParams);

#[pymethods]
impl PyFitParams {
    #[new]
    #[pyo3(signature = (amplitude, lambda_, gamma, t0, baseline))]
    fn new(amplitude: f64, lambda_: f64, gamma: f64, t0: f64, baseline: f64) -> Self {
        Self(FitParams::new(amplitude, lambda_, gamma, t0, baseline))
    }

    #[getter]
    fn amplitude(&self) -> f64 {
        self.0.amplitude
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.0.lambda
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn t0(&self) -> f64 {
        self.0.t0
    }

    #[getter]
    fn baseline(&self) -> f64 {
        self.0.baseline
    }

    /// Model values at each step.
    fn evaluate(&self, steps: Vec<f64>) -> PyResult<Vec<f64>> {
        eval_many(&self.0, &steps).map_err(err)
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.to_array().to_vec()
    }

    fn __repr__(&self) -> String {
        let p = &self.0;
        format!(
            "FitParams(amplitude={}, lambda_={}, gamma={}, t0={}, baseline={})",
            p.amplitude, p.lambda, p.gamma, p.t0, p.baseline
        )
    }
}

#[pyclass(name = "FitResult", module = "ma_py", frozen)]
pub struct PyFitResult(FitResult);

#[pymethods]
impl PyFitResult {
    #[getter]
    fn params(&self) -> PyFitParams {
        PyFitParams(self.0.params)
    }

    #[getter]
    fn sse(&self) -> f64 {
        self.0.sse
    }

    #[getter]
    fn r_squared(&self) -> Option<f64> {
        self.0.r_squared
    }

    #[getter]
    fn aic(&self) -> f64 {
        self.0.aic
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.0.n_points
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }
}

#[pyclass(name = "LayerTrajectory", module = "ma_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrajectory(pub LayerTrajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (model_id, layer, steps, ratios, n_inputs = 1))]
    fn new(model_id: String, layer: u32, steps: Vec<u64>, ratios: Vec<f64>, n_inputs: usize) -> PyResult<Self> {
        if steps.len() != ratios.len() {
            return Err(PyValueError::new_err(format!(
                "{} steps but {} ratios",
                steps.len(),
                ratios.len()
            )));
        }
        let points = steps
            .into_iter()
            .zip(ratios)
            .map(|(step, ratio)| TrajectoryPoint { step, ratio, n_inputs })
            .collect();
        LayerTrajectory::new(model_id, layer, points).map(Self).map_err(err)
    }

    /// Noisy samples of the model at `steps`.
    #[staticmethod]
    #[pyo3(signature = (params, steps, noise_sd = 0.0, seed = 0, model_id = "synthetic", layer = 1))]
    fn synthetic(
        params: &PyFitParams,
        steps: Vec<u64>,
        noise_sd: f64,
        seed: u64,
        model_id: &str,
        layer: u32,
    ) -> PyResult<Self> {
        gen_synthetic(model_id, layer, &params.0, &steps, noise_sd, seed)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn model_id(&self) -> String {
        self.0.model_id.clone()
    }

    #[getter]
    fn layer(&self) -> u32 {
        self.0.layer
    }

    #[getter]
    fn steps(&self) -> Vec<f64> {
        self.0.steps()
    }

    #[getter]
    fn ratios(&self) -> Vec<f64> {
        self.0.ratios()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "PeakReport", module = "ma_py", frozen)]
pub struct PyPeakReport(PeakReport);

#[pymethods]
impl PyPeakReport {
    #[getter]
    fn mode(&self) -> &'static str {
        self.0.mode.name()
    }

    #[getter]
    fn exists(&self) -> bool {
        self.0.exists
    }

    #[getter]
    fn t_peak(&self) -> Option<f64> {
        self.0.t_peak
    }

    #[getter]
    fn peak_value(&self) -> Option<f64> {
        self.0.peak_value
    }

    #[getter]
    fn within_training(&self) -> bool {
        self.0.within_training
    }

    fn __repr__(&self) -> String {
        let exists = if self.0.exists { "True" } else { "False" };
        let t_peak = self.0.t_peak.map_or("None".to_string(), |t| t.to_string());
        format!("PeakReport(mode={}, exists={exists}, t_peak={t_peak})", self.0.mode.name())
    }
}

#[pyclass(name = "ModeComparison", module = "ma_py", frozen)]
pub struct PyModeComparison(ModeComparison);

#[pymethods]
impl PyModeComparison {
    #[getter]
    fn paper_w0(&self) -> PyPeakReport {
        PyPeakReport(self.0.paper_w0)
    }

    #[getter]
    fn paper_wm1(&self) -> PyPeakReport {
        PyPeakReport(self.0.paper_wm1)
    }

    #[getter]
    fn corrected(&self) -> PyPeakReport {
        PyPeakReport(self.0.corrected)
    }

    #[getter]
    fn numeric(&self) -> PyPeakReport {
        PyPeakReport(self.0.numeric)
    }

    /// `"early_peak"` or `"log_increase"`.
    #[getter]
    fn regime(&self) -> &'static str {
        match self.0.regime {
            RegimeLabel::EarlyPeak => "early_peak",
            RegimeLabel::LogIncrease => "log_increase",
        }
    }

    /// Analytic modes that agree with the numerical peak.
    #[getter]
    fn matching_modes(&self) -> Vec<&'static str> {
        self.0.matching_modes.iter().map(|m| m.name()).collect()
    }

    fn modes_disagree(&self) -> bool {
        self.0.modes_disagree()
    }
}

#[pyclass(name = "Evaluation", module = "ma_py", frozen)]
pub struct PyEvaluation(Evaluation);

#[pymethods]
impl PyEvaluation {
    #[getter]
    fn target(&self) -> &'static str {
        self.0.table.target.name()
    }

    /// One `(kind, cv_mean_r2, test_r2, best)` tuple per regressor kind.
    fn metric_table(&self) -> Vec<(&'static str, f64, f64, bool)> {
        self.0
            .table
            .results
            .iter()
            .map(|r| (r.kind.name(), r.cv_mean_r2, r.test.r2, r.best))
            .collect()
    }

    #[getter]
    fn best_kind(&self) -> Option<&'static str> {
        self.0.table.best().map(|r| r.kind.name())
    }

    /// Best model's prediction in transformed target space.
    fn predict(&self, features: Vec<f64>) -> PyResult<f64> {
        self.best()?.predict(&features).map_err(err)
    }

    /// `(base_value, phi, prediction)` for the best model.
    fn shap(&self, features: Vec<f64>) -> PyResult<(f64, Vec<f64>, f64)> {
        let e = explain_pipeline(self.best()?, &features).map_err(err)?;
        Ok((e.base_value, e.phi, e.prediction))
    }

    /// Metric table as JSON.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.table).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

impl PyEvaluation {
    fn best(&self) -> PyResult<&ma_core::ml::Pipeline> {
        self.0
            .best_model()
            .ok_or_else(|| PyValueError::new_err("no model was selected"))
    }
}

/// Median, max and top-k of |h| for a row-major `seq_len x hidden_dim` tensor.
/// Returns `(median_abs, max_abs, [(value, seq_pos, dim), ...])`.
#[pyfunction]
#[pyo3(signature = (values, seq_len, hidden_dim, k = DEFAULT_TOP_K))]
fn layer_stats(values: Vec<f64>, seq_len: usize, hidden_dim: usize, k: usize) -> PyResult<(f64, f64, Vec<(f64, usize, usize)>)> {
    let t = ActivationTensor::new(seq_len, hidden_dim, values).map_err(err)?;
    let s = compute_layer_stats(&t, k).map_err(err)?;
    let top = s.top.iter().map(|e| (e.value, e.seq_pos, e.dim)).collect();
    Ok((s.median_abs, s.max_abs, top))
}

/// `(is_candidate, is_strict_massive, ratio)` for one stats line.
#[pyfunction]
#[pyo3(signature = (stats_line, threshold = DEFAULT_THRESHOLD))]
fn detect(stats_line: &str, threshold: f64) -> PyResult<(bool, bool, f64)> {
    let records = ingest_stats_lines(stats_line).map_err(err)?;
    let [record]: [StatsRecord; 1] = records
        .try_into()
        .map_err(|_| PyValueError::new_err("expected exactly one stats line"))?;
    let v = detect_massive(&record, threshold).map_err(err)?;
    Ok((v.is_candidate, v.is_strict_massive, v.ratio))
}

/// Decodes a MAT1 tensor into `(seq_len, hidden_dim, values)`.
#[pyfunction]
fn read_tensor(data: &[u8]) -> PyResult<(usize, usize, Vec<f64>)> {
    let t = read_raw_tensor(data).map_err(err)?;
    Ok((t.seq_len(), t.hidden_dim(), t.values().to_vec()))
}

#[pyfunction]
fn write_tensor<'py>(py: Python<'py>, values: Vec<f64>, seq_len: usize, hidden_dim: usize) -> PyResult<Bound<'py, PyBytes>> {
    let t = ActivationTensor::new(seq_len, hidden_dim, values).map_err(err)?;
    let mut buf = Vec::new();
    write_raw_tensor(&mut buf, &t).map_err(err)?;
    Ok(PyBytes::new(py, &buf))
}

/// Every layer trajectory in a stats JSONL text.
#[pyfunction]
fn trajectories_from_stats(text: &str) -> PyResult<Vec<PyTrajectory>> {
    let records = ingest_stats_lines(text).map_err(err)?;
    trajectory_keys(&records)
        .into_iter()
        .map(|(m, l)| build_trajectory(&records, &m, l).map(PyTrajectory).map_err(err))
        .collect()
}

#[pyfunction]
fn fit(trajectory: &PyTrajectory) -> PyResult<PyFitResult> {
    multistart_fit(&trajectory.0).map(PyFitResult).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (params, horizon = DEFAULT_HORIZON))]
fn peaks(params: &PyFitParams, horizon: f64) -> PyResult<PyModeComparison> {
    compare_modes(&params.0, horizon).map(PyModeComparison).map_err(err)
}

/// Lambert W on the principal (`branch=0`) or lower (`branch=-1`) branch.
#[pyfunction]
#[pyo3(signature = (x, branch = 0))]
fn lambertw(x: f64, branch: i32) -> PyResult<f64> {
    let b = match branch {
        0 => Branch::Principal,
        -1 => Branch::MinusOne,
        _ => return Err(PyValueError::new_err(format!("branch {branch} is not 0 or -1"))),
    };
    lambert_w(b, x).map_err(err)
}

#[pyfunction]
fn feature_names() -> Vec<&'static str> {
    FEATURE_NAMES.to_vec()
}

/// Feature vector of one (1-based) layer.
#[pyfunction]
fn features(n_layers: u32, hidden_dim: u32, n_heads: u32, intermediate_dim: u32, layer: u32) -> PyResult<Vec<f64>> {
    let arch = ModelArch {
        model_id: String::new(),
        n_layers,
        hidden_dim,
        n_heads,
        intermediate_dim,
    };
    build_features(&arch.at_layer(layer)).map(|f| f.0.to_vec()).map_err(err)
}

fn parse_target(name: &str) -> PyResult<TargetName> {
    TargetName::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown target {name}")))
}

/// Selects a regressor for one fitted parameter.
///
/// `fits` holds `(model_id, layer, FitParams)` triples; `registry` is the JSON
/// architecture registry.
#[pyfunction]
#[pyo3(signature = (fits, registry, target, seed = 0))]
fn predict(fits: Vec<(String, u32, PyRef<'_, PyFitParams>)>, registry: &str, target: &str, seed: u64) -> PyResult<PyEvaluation> {
    let target = parse_target(target)?;
    let registry = parse_registry(registry).map_err(err)?;
    let fits: Vec<LayerParams> = fits
        .into_iter()
        .map(|(model_id, layer, p)| LayerParams { model_id, layer, params: p.0 })
        .collect();
    let dataset = ParamDataset::assemble(&fits, &registry, target).map_err(err)?;
    let config = EvalConfig { seed, ..EvalConfig::default() };
    evaluate_and_select(&dataset, &config).map(PyEvaluation).map_err(err)
}

#[pymodule]
pub fn ma_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFitParams>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyPeakReport>()?;
    m.add_class::<PyModeComparison>()?;
    m.add_class::<PyEvaluation>()?;
    m.add_function(wrap_pyfunction!(layer_stats, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(trajectories_from_stats, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(peaks, m)?)?;
    m.add_function(wrap_pyfunction!(lambertw, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add("DEFAULT_HORIZON", DEFAULT_HORIZON)?;
    m.add("DEFAULT_THRESHOLD", DEFAULT_THRESHOLD)?;
    Ok(())
}
