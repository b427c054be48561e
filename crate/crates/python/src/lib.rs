//! Python bindings for `csicount`. Matrices cross the boundary as lists of
//! rows (lists of floats).

use std::collections::BTreeMap;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use csicount::counting::{predict_count, ActivityPipeline};
use csicount::csi_io::{read_capture, split_streams, write_capture, CsiCapture};
use csicount::dwt::{dwt_decompose, dwt_reconstruct};
use csicount::hmm::{classify_activity, fit_hmm, read_hmm, write_hmm, ActivityLabel, GaussianHmm};
use csicount::neural::{build_fcbp, gradient_check, Coverage, DeepCountConfig, Network, Tensor};
use csicount::preprocess::{counting_windows, fitted_slope as core_fitted_slope, sanitize_phase as core_sanitize, CountingConfig};
use csicount::sim::{inject_phase_offsets, make_activity_scene, make_count_scene, simulate_capture, PhaseDistortion};

fn py_err(e: csicount::Error) -> PyErr {
    match e {
        csicount::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    Array2::from_shape_vec((rows.len(), ncols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn label(name: &str) -> PyResult<ActivityLabel> {
    name.parse().map_err(py_err)
}

/// A CSI recording: frames of `n_tx * n_rx` streams by `n_sub` subcarriers.
#[pyclass(name = "Capture", module = "pycsicount")]
struct PyCapture {
    inner: CsiCapture,
}

#[pymethods]
impl PyCapture {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: read_capture(path).map_err(py_err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_capture(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn rate_hz(&self) -> f32 {
        self.inner.rate_hz
    }

    /// `(n_tx, n_rx, n_sub)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.n_tx, self.inner.n_rx, self.inner.n_sub)
    }

    #[getter]
    fn label(&self) -> Option<String> {
        self.inner.label.clone()
    }

    fn timestamps(&self) -> Vec<f64> {
        self.inner.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Time x (stream * n_sub + subcarrier) moduli.
    fn amplitude(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&split_streams(&self.inner).map_err(py_err)?.0.data))
    }

    /// Same layout as `amplitude`, principal arguments in radians.
    fn phase(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&split_streams(&self.inner).map_err(py_err)?.1.data))
    }

    #[pyo3(signature = (sfo=0.0, cfo=0.0, jitter=0.0, seed=0))]
    fn inject_phase_offsets(&self, sfo: f64, cfo: f64, jitter: f64, seed: u64) -> PyResult<Self> {
        let d = PhaseDistortion::new(sfo, cfo, jitter);
        Ok(Self { inner: inject_phase_offsets(&self.inner, d, seed).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!("Capture(frames={}, rate_hz={}, shape=({}, {}, {}))", c.len(), c.rate_hz, c.n_tx, c.n_rx, c.n_sub)
    }
}

/// Capture of a random room with `persons` walkers.
#[pyfunction]
#[pyo3(signature = (persons, duration=4.0, rate=1500.0, seed=0))]
fn simulate_count(persons: usize, duration: f64, rate: f64, seed: u64) -> PyResult<PyCapture> {
    let scene = make_count_scene(persons, seed).map_err(py_err)?;
    Ok(PyCapture { inner: simulate_capture(&scene, duration, rate, seed).map_err(py_err)? })
}

/// Capture of one person performing `activity` (name or one-letter code).
#[pyfunction]
#[pyo3(signature = (activity, duration=4.0, rate=1500.0, seed=0))]
fn simulate_activity(activity: &str, duration: f64, rate: f64, seed: u64) -> PyResult<PyCapture> {
    let scene = make_activity_scene(label(activity)?, seed);
    Ok(PyCapture { inner: simulate_capture(&scene, duration, rate, seed).map_err(py_err)? })
}

#[pyfunction]
fn sanitize_phase(phase: Vec<Vec<f64>>, n_pairs: usize, n_sub: usize) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix(&phase)?;
    Ok(rows(&core_sanitize(m.view(), n_pairs, n_sub).map_err(py_err)?))
}

#[pyfunction]
fn fitted_slope(y: Vec<f64>) -> f64 {
    core_fitted_slope(&y)
}

/// D4 decomposition; returns `(details, approx)` with `details[0]` the
/// highest band.
#[pyfunction]
#[pyo3(signature = (signal, levels=10))]
fn dwt(signal: Vec<f64>, levels: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = dwt_decompose(&signal, levels).map_err(py_err)?;
    Ok((d.detail, d.approx))
}

/// Decompose then reconstruct; returns the rebuilt signal.
#[pyfunction]
#[pyo3(signature = (signal, levels=10))]
fn dwt_round_trip(signal: Vec<f64>, levels: usize) -> PyResult<Vec<f64>> {
    let d = dwt_decompose(&signal, levels).map_err(py_err)?;
    dwt_reconstruct(&d).map_err(py_err)
}

/// HMM observation sequence for a capture (one feature vector per window).
#[pyfunction]
fn activity_features(capture: &PyCapture) -> PyResult<Vec<Vec<f64>>> {
    ActivityPipeline::default().capture_observations(&capture.inner).map_err(py_err)
}

#[pyclass(name = "GaussianHmm", module = "pycsicount", from_py_object)]
#[derive(Clone)]
struct PyHmm {
    inner: GaussianHmm,
}

#[pymethods]
impl PyHmm {
    #[staticmethod]
    #[pyo3(signature = (sequences, n_states=4, tol=1e-4, max_iter=200, seed=0))]
    fn fit(sequences: Vec<Vec<Vec<f64>>>, n_states: usize, tol: f64, max_iter: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: fit_hmm(&sequences, n_states, tol, max_iter, seed).map_err(py_err)? })
    }

    /// Returns `(label, model)`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(String, Self)> {
        let (label, inner) = read_hmm(path).map_err(py_err)?;
        Ok((label, Self { inner }))
    }

    fn save(&self, path: &str, label: &str) -> PyResult<()> {
        write_hmm(path, label, &self.inner).map_err(py_err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_likelihood(&self, obs: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.log_likelihood(&obs).map_err(py_err)
    }

    fn viterbi(&self, obs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.viterbi(&obs).map_err(py_err)
    }
}

/// Label of the model with the highest likelihood for `obs`.
#[pyfunction]
fn classify(models: BTreeMap<String, PyHmm>, obs: Vec<Vec<f64>>) -> PyResult<String> {
    let mut by_label = BTreeMap::new();
    for (name, m) in models {
        by_label.insert(label(&name)?, m.inner);
    }
    Ok(classify_activity(&by_label, &obs).map_err(py_err)?.name().to_string())
}

/// A counting network (DeepCount or the FCBP baseline).
#[pyclass(name = "Network", module = "pycsicount")]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn deepcount(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: DeepCountConfig::published().build(seed).map_err(py_err)? })
    }

    /// DeepCount at toy scale (12 x 20 input).
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn toy(seed: u64) -> PyResult<Self> {
        Ok(Self { inner: DeepCountConfig::toy().build(seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn fcbp() -> Self {
        Self { inner: build_fcbp() }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Network::load(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape.clone()
    }

    /// Output shape of every block for a zero input.
    fn shape_trace(&mut self) -> PyResult<Vec<Vec<usize>>> {
        let x = Tensor::zeros(self.inner.input_shape.clone());
        Ok(self.inner.forward_trace(&x).map_err(py_err)?.1)
    }

    /// Predicted person count for every counting window of `capture`.
    fn predict(&mut self, capture: &PyCapture) -> PyResult<Vec<usize>> {
        let windows = counting_windows(&capture.inner, &CountingConfig::default()).map_err(py_err)?;
        windows.iter().map(|w| Ok(predict_count(&mut self.inner, w).map_err(py_err)?.0)).collect()
    }

    /// Finite-difference check on a seeded random batch; returns the maximum
    /// relative error. `per_tensor` samples entries instead of checking all.
    #[pyo3(signature = (eps=1e-5, batch=2, per_tensor=None, seed=0))]
    fn gradcheck(&mut self, eps: f64, batch: usize, per_tensor: Option<usize>, seed: u64) -> PyResult<f64> {
        let batch = batch.max(1);
        let x = self.inner.random_input(batch, seed.wrapping_add(1));
        let labels: Vec<usize> = (0..batch).map(|i| i % 5 + 1).collect();
        let coverage = per_tensor.map_or(Coverage::All, |n| Coverage::Sampled { per_tensor: n, seed });
        Ok(gradient_check(&mut self.inner, &x, &labels, eps, coverage, None).map_err(py_err)?.max_rel_err)
    }
}

#[pymodule]
fn pycsicount(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCapture>()?;
    m.add_class::<PyHmm>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(simulate_count, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_activity, m)?)?;
    m.add_function(wrap_pyfunction!(sanitize_phase, m)?)?;
    m.add_function(wrap_pyfunction!(fitted_slope, m)?)?;
    m.add_function(wrap_pyfunction!(dwt, m)?)?;
    m.add_function(wrap_pyfunction!(dwt_round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(activity_features, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    Ok(())
}
