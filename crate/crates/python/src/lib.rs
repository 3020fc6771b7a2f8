//! Python bindings for the apgmos quality predictor.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use apgmos::audio::{load_wav, Waveform};
use apgmos::embeddings::{load_embedding, synth_dataset as synth};
use apgmos::losses::{total_loss as loss, LossConfig};
use apgmos::numerics::{load_checkpoint, Tensor};
use apgmos::rvq;
use apgmos::training::{self, Frontend, Mode};
use apgmos::{cochlea, fusion, metrics, Error};

type Matrix = Vec<Vec<f64>>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_rows(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn from_rows(m: &Matrix) -> PyResult<Tensor> {
    Tensor::from_rows(m).map_err(err)
}

fn waveform(samples: Vec<f64>, sample_rate_hz: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate_hz).map_err(err)
}

fn mode(s: &str) -> PyResult<Mode> {
    s.parse().map_err(err)
}

#[pyfunction]
fn erb_bandwidth(f_hz: f64) -> PyResult<f64> {
    cochlea::erb_bandwidth(f_hz).map_err(err)
}

#[pyfunction]
fn erb_rate(f_hz: f64) -> f64 {
    cochlea::erb_rate(f_hz)
}

/// ERB-spaced center frequencies for `channels` bands at `sample_rate_hz`.
#[pyfunction]
#[pyo3(signature = (channels, sample_rate_hz = 16000))]
fn erb_centers(channels: usize, sample_rate_hz: u32) -> PyResult<Vec<f64>> {
    Ok(cochlea::ErbScale::for_sample_rate(channels, sample_rate_hz)
        .map_err(err)?
        .centers()
        .to_vec())
}

/// Cochleagram at the input rate, N × channels.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, channels = 64))]
fn cochleagram(samples: Vec<f64>, sample_rate_hz: u32, channels: usize) -> PyResult<Matrix> {
    let w = waveform(samples, sample_rate_hz)?;
    let scale = cochlea::ErbScale::for_sample_rate(channels, sample_rate_hz).map_err(err)?;
    Ok(to_rows(cochlea::cochleagram(&w, &scale).map_err(err)?.data()))
}

/// 40 Hz pooled cochleagram of a waveform resampled to 16 kHz.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, channels = 64))]
fn pooled_frames(samples: Vec<f64>, sample_rate_hz: u32, channels: usize) -> PyResult<Matrix> {
    let w = waveform(samples, sample_rate_hz)?;
    Ok(to_rows(&Frontend::new(channels).map_err(err)?.pooled(&w).map_err(err)?))
}

#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f64>, u32)> {
    let w = load_wav(path).map_err(err)?;
    Ok((w.samples().to_vec(), w.sample_rate_hz()))
}

#[pyfunction]
fn read_embedding(path: &str) -> PyResult<Matrix> {
    Ok(to_rows(load_embedding(path).map_err(err)?.frames()))
}

#[pyfunction]
fn band_mask(n_a: usize, n_s: usize, n_w: usize, tau: f64) -> Vec<Vec<bool>> {
    let m = fusion::band_mask(n_a, n_s, n_w, tau);
    (0..n_a + n_s).map(|i| (0..n_w).map(|j| m.get(i, j)).collect()).collect()
}

#[pyfunction]
fn mse(pred: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    metrics::mse(&pred, &actual).map_err(err)
}

#[pyfunction]
fn lcc(pred: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    metrics::lcc(&pred, &actual).map_err(err)
}

#[pyfunction]
fn srcc(pred: Vec<f64>, actual: Vec<f64>) -> PyResult<f64> {
    metrics::srcc(&pred, &actual).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, actual, tau_b = false))]
fn ktau(pred: Vec<f64>, actual: Vec<f64>, tau_b: bool) -> PyResult<f64> {
    if tau_b {
        metrics::ktau_b(&pred, &actual).map_err(err)
    } else {
        metrics::ktau(&pred, &actual).map_err(err)
    }
}

/// Returns `(total, rank, reg)`.
#[pyfunction]
#[pyo3(signature = (pred, actual, alpha = 0.9, beta = 0.1))]
fn total_loss(pred: Vec<f64>, actual: Vec<f64>, alpha: f64, beta: f64) -> PyResult<(f64, f64, f64)> {
    let cfg = LossConfig::new(alpha, beta).map_err(err)?;
    let b = loss(&pred, &actual, &cfg).map_err(err)?;
    Ok((b.total, b.rank, b.reg))
}

/// Synthetic benchmark as `(system_id, utterance_id, true_mos, samples)`.
#[pyfunction]
fn synth_dataset(n_systems: usize, utts_per_system: usize, seed: u64) -> PyResult<Vec<(String, String, f64, Vec<f64>)>> {
    Ok(synth(n_systems, utts_per_system, seed)
        .map_err(err)?
        .into_iter()
        .map(|s| (s.system_id, s.utterance_id, s.true_mos, s.waveform.samples().to_vec()))
        .collect())
}

/// `(encoder, projection, fusion, decoder, end-to-end)` maximum relative errors.
#[pyfunction]
#[pyo3(signature = (seed = 0, instances = 3))]
fn gradient_suite(seed: u64, instances: usize) -> PyResult<Vec<(String, f64)>> {
    Ok(training::gradient_suite(seed, instances)
        .map_err(err)?
        .into_iter()
        .map(|r| (r.name.to_owned(), r.max_relative_error))
        .collect())
}

/// Stacked residual codebooks.
#[pyclass(name = "RvqCodebook")]
struct PyRvq(rvq::RvqCodebook);

#[pymethods]
impl PyRvq {
    #[staticmethod]
    #[pyo3(signature = (frames, codebook_size, stages = 2, iterations = 50, seed = 0))]
    fn train(frames: Matrix, codebook_size: usize, stages: usize, iterations: usize, seed: u64) -> PyResult<Self> {
        let data = from_rows(&frames)?;
        Ok(Self(rvq::train_rvq(&data, codebook_size, stages, iterations, seed).map_err(err)?))
    }

    #[getter]
    fn stages(&self) -> usize {
        self.0.stages().len()
    }

    /// Per-stage `(quantized, residual, indices)`.
    fn forward(&self, frames: Matrix) -> PyResult<Vec<(Matrix, Matrix, Vec<usize>)>> {
        let out = rvq::rvq_forward_matrix(&self.0, &from_rows(&frames)?).map_err(err)?;
        Ok(out
            .quantized
            .iter()
            .zip(&out.residuals)
            .zip(out.indices)
            .map(|((q, r), i)| (to_rows(q), to_rows(r), i))
            .collect())
    }

    /// First-stage residual.
    fn semantic_distortion(&self, frames: Matrix) -> PyResult<Matrix> {
        let out = rvq::rvq_forward_matrix(&self.0, &from_rows(&frames)?).map_err(err)?;
        Ok(to_rows(&out.residuals[0]))
    }
}

/// Trained model loaded from an APGW checkpoint.
#[pyclass(name = "Predictor")]
struct PyPredictor(training::Predictor);

#[pymethods]
impl PyPredictor {
    #[new]
    fn new(checkpoint: &str) -> PyResult<Self> {
        let params = load_checkpoint(checkpoint).map_err(err)?;
        Ok(Self(training::Predictor::new(params).map_err(err)?))
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.frontend().channels()
    }

    #[getter]
    fn has_fusion(&self) -> bool {
        self.0.fusion_config().is_some()
    }

    #[pyo3(signature = (samples, sample_rate_hz, w2v, h = None, mode = "pruned"))]
    fn predict(&self, samples: Vec<f64>, sample_rate_hz: u32, w2v: Matrix, h: Option<Matrix>, mode: &str) -> PyResult<f64> {
        let w = waveform(samples, sample_rate_hz)?;
        let h = h.as_ref().map(from_rows).transpose()?;
        self.0
            .predict(&w, &from_rows(&w2v)?, h.as_ref(), self::mode(mode)?)
            .map_err(err)
    }

    fn predict_apm(&self, samples: Vec<f64>, sample_rate_hz: u32) -> PyResult<f64> {
        let w = waveform(samples, sample_rate_hz)?;
        let frames = self.0.frontend().pooled(&w).map_err(err)?;
        self.0.predict_apm_frames(&frames).map_err(err)
    }

    /// Per-layer attention matrices.
    #[pyo3(signature = (samples, sample_rate_hz, w2v, h = None, mode = "full"))]
    fn attention(&self, samples: Vec<f64>, sample_rate_hz: u32, w2v: Matrix, h: Option<Matrix>, mode: &str) -> PyResult<Vec<Matrix>> {
        let w = waveform(samples, sample_rate_hz)?;
        let frames = self.0.frontend().pooled(&w).map_err(err)?;
        let h = h.as_ref().map(from_rows).transpose()?;
        let out = self
            .0
            .fused(&frames, &from_rows(&w2v)?, h.as_ref(), self::mode(mode)?)
            .map_err(err)?;
        Ok(out.weights.iter().map(to_rows).collect())
    }

    fn flops(&self, n_s: usize, n_w: usize, mode: &str) -> PyResult<u64> {
        self.0.flops(n_s, n_w, self::mode(mode)?).map_err(err)
    }
}

#[pymodule]
fn apgmos_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(erb_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(erb_rate, m)?)?;
    m.add_function(wrap_pyfunction!(erb_centers, m)?)?;
    m.add_function(wrap_pyfunction!(cochleagram, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_frames, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(read_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(band_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(lcc, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(ktau, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_class::<PyRvq>()?;
    m.add_class::<PyPredictor>()?;
    Ok(())
}
