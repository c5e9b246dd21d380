//! Python bindings: images, configurations, training, encoding and decoding.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use sgi_core::trainer::{self, TrainReport};
use sgi_core::{SgiError, SizeReport};

create_exception!(sgi, CodecError, PyException, "Raised for invalid configurations and numeric failures.");
create_exception!(sgi, CorruptStreamError, CodecError, "Raised when a bitstream fails to decode.");

fn to_py(e: SgiError) -> PyErr {
    match e {
        SgiError::Io(_) | SgiError::Image(_) => PyIOError::new_err(e.to_string()),
        SgiError::Dimension(_) | SgiError::Config(_) => PyValueError::new_err(e.to_string()),
        SgiError::Corrupt(_) => CorruptStreamError::new_err(e.to_string()),
        SgiError::Numeric(_) => CodecError::new_err(e.to_string()),
    }
}

/// RGB image with float channels in [0, 1], row-major and interleaved.
#[pyclass(name = "Image", module = "sgi", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    pub inner: sgi_core::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f32>) -> PyResult<Self> {
        sgi_core::Image::from_data(width, height, data).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        sgi_core::load_image(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sgi_core::save_image(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Flat channel data of length `3 * width * height`.
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<(f32, f32, f32)> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside the image")));
        }
        Ok((self.inner.get(x, y, 0), self.inner.get(x, y, 1), self.inner.get(x, y, 2)))
    }

    fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> PyResult<Self> {
        self.inner.crop(x, y, width, height).map(|inner| Self { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width, self.inner.height)
    }
}

/// Model shape: seed count, Gaussians per seed and feature width.
#[pyclass(name = "ModelConfig", module = "sgi", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    pub inner: sgi_core::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (n_seeds, gaussians_per_seed=10, feature_dim=24))]
    fn new(n_seeds: usize, gaussians_per_seed: usize, feature_dim: usize) -> PyResult<Self> {
        let inner = sgi_core::ModelConfig::new(n_seeds, gaussians_per_seed).with_feature_dim(feature_dim);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Configuration for `gaussians` total, with `round(gaussians / k)` seeds.
    #[staticmethod]
    #[pyo3(signature = (gaussians, k=10))]
    fn for_gaussians(gaussians: usize, k: usize) -> PyResult<Self> {
        if k == 0 || gaussians < k {
            return Err(PyValueError::new_err("need gaussians >= k >= 1"));
        }
        Self::new(((gaussians as f64 / k as f64).round() as usize).max(1), k, 24)
    }

    #[getter]
    fn n_seeds(&self) -> usize {
        self.inner.n_seeds
    }

    #[getter]
    fn gaussians_per_seed(&self) -> usize {
        self.inner.gaussians_per_seed
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(n_seeds={}, gaussians_per_seed={}, feature_dim={})",
            self.inner.n_seeds, self.inner.gaussians_per_seed, self.inner.feature_dim
        )
    }
}

/// Optimization schedule.
#[pyclass(name = "TrainConfig", module = "sgi", from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    pub inner: sgi_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (steps=15000, levels=3, lambda_=0.001, seed=0, decay=true))]
    fn new(steps: usize, levels: usize, lambda_: f64, seed: u64, decay: bool) -> PyResult<Self> {
        let inner = sgi_core::TrainConfig {
            steps,
            levels,
            lambda: lambda_,
            seed,
            decay,
            log_every: 100,
            ..Default::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(steps={}, levels={}, lambda_={}, seed={}, decay={})",
            self.inner.steps, self.inner.levels, self.inner.lambda, self.inner.seed, self.inner.decay
        )
    }
}

/// A trained or decoded model.
#[pyclass(name = "Model", module = "sgi", from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    pub inner: sgi_core::SgiModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn decode(py: Python<'_>, data: &[u8]) -> PyResult<Self> {
        let data = data.to_vec();
        py.detach(|| sgi_core::decode_model(&data)).map(|inner| Self { inner }).map_err(to_py)
    }

    /// Serializes to the `.sgi` container.
    fn encode<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let enc = py.detach(|| sgi_core::encode_model(&self.inner)).map_err(to_py)?;
        Ok(PyBytes::new(py, &enc.bytes))
    }

    #[pyo3(signature = (scale=1.0))]
    fn render(&self, py: Python<'_>, scale: f64) -> PyResult<PyImage> {
        py.detach(|| sgi_core::render_at_scale(&self.inner, scale)).map(|inner| PyImage { inner }).map_err(to_py)
    }

    /// `{"psnr_db": ..., "ssim": ...}` of the native render against `image`.
    fn evaluate<'py>(&self, py: Python<'py>, image: &PyImage) -> PyResult<Bound<'py, PyDict>> {
        let m = py.detach(|| sgi_core::evaluate(&image.inner, &self.inner)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("psnr_db", m.psnr_db)?;
        d.set_item("ssim", m.ssim)?;
        Ok(d)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.seeds.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.seeds.height
    }

    #[getter]
    fn n_seeds(&self) -> usize {
        self.inner.seeds.len()
    }

    #[getter]
    fn gaussians(&self) -> usize {
        self.inner.seeds.len() * self.inner.seeds.gaussians_per_seed
    }

    fn __repr__(&self) -> String {
        format!("Model({}x{}, {} gaussians)", self.width(), self.height(), self.gaussians())
    }
}

fn sizes_dict<'py>(py: Python<'py>, r: &SizeReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, bytes) in r.rows() {
        d.set_item(name, bytes)?;
    }
    d.set_item("total", r.total)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &TrainReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("steps", r.steps_executed)?;
    d.set_item("wall_s", r.wall_ms / 1000.0)?;
    d.set_item("final_psnr", r.final_psnr)?;
    d.set_item("final_ssim", r.final_ssim)?;
    d.set_item("estimated_bytes", r.estimated_bytes)?;
    d.set_item("l_img", r.records.iter().map(|s| s.l_img).collect::<Vec<_>>())?;
    Ok(d)
}

/// Result of [`compress`]: the stream, the decoded model and its metrics.
#[pyclass(name = "Compressed", module = "sgi")]
pub struct PyCompressed {
    inner: trainer::Compressed,
}

#[pymethods]
impl PyCompressed {
    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encoded.bytes)
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.encoded.decoded.clone(),
        }
    }

    #[getter]
    fn psnr_db(&self) -> f64 {
        self.inner.metrics.psnr_db
    }

    #[getter]
    fn ssim(&self) -> f64 {
        self.inner.metrics.ssim
    }

    #[getter]
    fn sizes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        sizes_dict(py, &self.inner.encoded.report)
    }

    #[getter]
    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.inner.report)
    }
}

/// Trains a model; returns `(model, report)`.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    image: &PyImage,
    model_config: &PyModelConfig,
    train_config: &PyTrainConfig,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let (model, report) = py
        .detach(|| sgi_core::train(&image.inner, &model_config.inner, &train_config.inner))
        .map_err(to_py)?;
    Ok((PyModel { inner: model }, report_dict(py, &report)?))
}

/// Trains, encodes and evaluates the decoded model.
#[pyfunction]
fn compress(py: Python<'_>, image: &PyImage, model_config: &PyModelConfig, train_config: &PyTrainConfig) -> PyResult<PyCompressed> {
    py.detach(|| trainer::compress(&image.inner, &model_config.inner, &train_config.inner))
        .map(|inner| PyCompressed { inner })
        .map_err(to_py)
}

#[pyfunction]
fn decode(py: Python<'_>, data: &[u8]) -> PyResult<PyModel> {
    PyModel::decode(py, data)
}

#[pyfunction]
fn load_image(path: &str) -> PyResult<PyImage> {
    PyImage::load(path)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    sgi_core::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    sgi_core::ssim(&a.inner, &b.inner).map_err(to_py)
}

/// Component sizes of a stream in bytes.
#[pyfunction]
fn stream_sizes<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    sizes_dict(py, &sgi_core::codec::size_report(data).map_err(to_py)?)
}

#[pymodule]
fn sgi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCompressed>()?;
    m.add("CodecError", m.py().get_type::<CodecError>())?;
    m.add("CorruptStreamError", m.py().get_type::<CorruptStreamError>())?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(stream_sizes, m)?)?;
    Ok(())
}
