//! Python module `wait_py`: the warping kernels, the temporal metrics, FID
//! statistics and checkpoint inference.

use std::path::PathBuf;

use ndarray::{Array3, Axis};
use numpy::{
    IntoPyArray, PyArray1, PyArray2, PyArray3, PyArray4, PyReadonlyArray1, PyReadonlyArray2, PyReadonlyArray3,
    PyReadonlyArray4,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use wait_core::checkpoint::Checkpoint;
use wait_core::config::VariantConfig;
use wait_core::error::ErrorClass;
use wait_core::metrics;
use wait_core::training::Model;
use wait_core::warping_ops::{self, FlowField, OcclusionMask};

create_exception!(wait_py, WaitError, PyException);
create_exception!(wait_py, ConfigError, WaitError);
create_exception!(wait_py, DataError, WaitError);
create_exception!(wait_py, NumericalError, WaitError);

fn py_err(e: wait_core::Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Numerical => NumericalError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for wait_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Deformable 3x3 convolution. `offsets` holds (dx, dy) per tap, row-major.
#[pyfunction]
#[pyo3(signature = (x, offsets, weight, bias=None))]
fn deformable_conv<'py>(
    py: Python<'py>,
    x: PyReadonlyArray4<'py, f64>,
    offsets: PyReadonlyArray4<'py, f64>,
    weight: PyReadonlyArray4<'py, f64>,
    bias: Option<PyReadonlyArray1<'py, f64>>,
) -> PyResult<Bound<'py, PyArray4<f64>>> {
    let bias = bias.as_ref().map(|b| b.as_array().to_vec());
    let out = warping_ops::deformable_conv(
        &x.as_array().to_owned(),
        &offsets.as_array().to_owned(),
        &weight.as_array().to_owned(),
        bias.as_deref(),
    )
    .py()?;
    Ok(out.into_pyarray(py))
}

/// Backward warp: `out(p) = image(p + flow(p))`, zero outside the frame.
#[pyfunction]
fn flow_warp<'py>(
    py: Python<'py>,
    image: PyReadonlyArray4<'py, f64>,
    flow: PyReadonlyArray4<'py, f64>,
) -> PyResult<Bound<'py, PyArray4<f64>>> {
    let out = warping_ops::flow_warp(&image.as_array().to_owned(), &flow.as_array().to_owned()).py()?;
    Ok(out.into_pyarray(py))
}

fn flow_field(a: PyReadonlyArray3<'_, f32>) -> PyResult<FlowField> {
    FlowField::new(a.as_array().to_owned()).py()
}

/// 1 where the flow pair is consistent, 0 where occluded. Flows are `(H, W, 2)`.
#[pyfunction]
fn occlusion_mask<'py>(
    py: Python<'py>,
    forward: PyReadonlyArray3<'py, f32>,
    backward: PyReadonlyArray3<'py, f32>,
) -> PyResult<Bound<'py, PyArray2<u8>>> {
    let m = warping_ops::occlusion_mask(&flow_field(forward)?, &flow_field(backward)?).py()?;
    Ok(m.data.into_pyarray(py))
}

#[pyfunction]
fn read_flo<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyArray3<f32>>> {
    Ok(metrics::read_flo(&path).py()?.data.into_pyarray(py))
}

#[pyfunction]
fn write_flo(path: PathBuf, flow: PyReadonlyArray3<'_, f32>) -> PyResult<()> {
    metrics::write_flo(&path, &flow_field(flow)?).py()
}

fn frames(a: &PyReadonlyArray4<'_, f64>) -> Vec<Array3<f64>> {
    a.as_array().axis_iter(Axis(0)).map(|f| f.to_owned()).collect()
}

/// Temporal MSE of `(T, C, H, W)` sequences, on whatever scale they are given.
#[pyfunction]
fn temporal_mse(inputs: PyReadonlyArray4<'_, f64>, outputs: PyReadonlyArray4<'_, f64>) -> PyResult<f64> {
    metrics::temporal_mse_raw(&frames(&inputs), &frames(&outputs)).py()
}

/// Mean masked warping error over consecutive pairs.
///
/// `frames` is `(T, C, H, W)`, `flows` `(T-1, H, W, 2)` mapping frame t into
/// t-1, `masks` `(T-1, H, W)`.
#[pyfunction]
fn flow_warping_error(
    frames: PyReadonlyArray4<'_, f64>,
    flows: PyReadonlyArray4<'_, f32>,
    masks: PyReadonlyArray3<'_, u8>,
) -> PyResult<f64> {
    let f = self::frames(&frames);
    let flows = flows.as_array();
    let masks = masks.as_array();
    if f.len() < 2 || flows.shape()[0] != f.len() - 1 || masks.shape()[0] != f.len() - 1 {
        return Err(DataError::new_err(format!(
            "{} frames need {} flows and masks, got {} and {}",
            f.len(),
            f.len().saturating_sub(1),
            flows.shape()[0],
            masks.shape()[0]
        )));
    }
    let mut total = 0.0;
    for t in 1..f.len() {
        let flow = FlowField::new(flows.index_axis(Axis(0), t - 1).to_owned()).py()?;
        let mask = OcclusionMask {
            data: masks.index_axis(Axis(0), t - 1).to_owned(),
        };
        total += metrics::fwe_pair(&f[t - 1], &f[t], &flow, &mask).py()?;
    }
    Ok(total / (f.len() - 1) as f64)
}

/// Gaussian fit of feature vectors, for FID.
#[pyclass(name = "FeatureStats", module = "wait_py")]
struct PyFeatureStats {
    inner: metrics::FeatureStats,
}

#[pymethods]
impl PyFeatureStats {
    #[new]
    fn new(mean: PyReadonlyArray1<'_, f64>, covariance: PyReadonlyArray2<'_, f64>, sample_count: usize) -> PyResult<Self> {
        let cov: Vec<f64> = covariance.as_array().iter().copied().collect();
        let inner = metrics::FeatureStats::new(mean.as_array().to_vec(), cov, sample_count).py()?;
        Ok(PyFeatureStats { inner })
    }

    /// From an `(N, D)` feature matrix.
    #[staticmethod]
    fn from_features(features: PyReadonlyArray2<'_, f64>) -> PyResult<Self> {
        let a = features.as_array();
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
        let inner = metrics::FeatureStats::from_features(rows.iter().map(Vec::as_slice)).py()?;
        Ok(PyFeatureStats { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFeatureStats {
            inner: metrics::FeatureStats::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn mean<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray1<f64>> {
        self.inner.mean.clone().into_pyarray(py)
    }

    #[getter]
    fn covariance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let d = self.inner.dim();
        let a = ndarray::Array2::from_shape_vec((d, d), self.inner.covariance.clone())
            .map_err(|e| DataError::new_err(e.to_string()))?;
        Ok(a.into_pyarray(py))
    }

    #[getter]
    fn sample_count(&self) -> usize {
        self.inner.sample_count
    }

    fn __repr__(&self) -> String {
        format!("FeatureStats(dim={}, samples={})", self.inner.dim(), self.inner.sample_count)
    }
}

#[pyfunction]
fn fid(real: &PyFeatureStats, fake: &PyFeatureStats) -> PyResult<f64> {
    metrics::fid(&real.inner, &fake.inner).py()
}

/// Parses and validates a variant config; returns its canonical TOML.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    Ok(VariantConfig::from_toml(text).py()?.to_toml())
}

/// A trained translator loaded from a checkpoint.
#[pyclass(name = "Model", module = "wait_py", unsendable)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).py()?;
        Ok(PyModel {
            inner: Model::from_checkpoint(&ckpt).py()?,
        })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.key()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    #[getter]
    fn architecture_hash(&self) -> String {
        self.inner.architecture_hash()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_toml()
    }

    /// Source-to-target translation of `(N, 3, S, S)` frames in `[-1, 1]`.
    /// `aux` is the neighbouring frame for warping generators; the input
    /// itself when omitted.
    #[pyo3(signature = (x, aux=None))]
    fn translate<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray4<'py, f64>,
        aux: Option<PyReadonlyArray4<'py, f64>>,
    ) -> PyResult<Bound<'py, PyArray4<f64>>> {
        let x = x.as_array().to_owned();
        let aux = aux.map(|a| a.as_array().to_owned());
        let out = self.inner.translate_batch(&x, aux.as_ref()).py()?;
        Ok(out.into_pyarray(py))
    }
}

#[pymodule]
fn wait_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("WaitError", m.py().get_type::<WaitError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_class::<PyFeatureStats>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(deformable_conv, m)?)?;
    m.add_function(wrap_pyfunction!(flow_warp, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_mask, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_mse, m)?)?;
    m.add_function(wrap_pyfunction!(flow_warping_error, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    Ok(())
}
