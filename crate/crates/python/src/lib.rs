//! Python bindings. Masks cross the boundary as `(width, height, values)`
//! with row-major values; any non-zero value is a set pixel.

use std::collections::HashMap;
use std::path::PathBuf;

use fetometry::eval::{self, EvalOptions, Routing};
use fetometry::geometry::{self, BinaryMask};
use fetometry::network::{load_model, save_model};
use fetometry::synth::{self, GenOptions, Split};
use fetometry::tensor::Tensor;
use fetometry::training::{self, TrainConfig};
use fetometry::{Error, OrganClass, UNetConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

pyo3::create_exception!(
    fetometry,
    FitError,
    PyValueError,
    "A geometric fit could not produce a valid primitive."
);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Fit(_) => FitError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Parse { .. } | Error::Consistency(_) => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

fn mask(width: usize, height: usize, values: Vec<u8>) -> PyResult<BinaryMask> {
    BinaryMask::from_bits(width, height, values.into_iter().map(|v| v != 0).collect()).map_err(to_py)
}

fn organ(name: &str) -> PyResult<OrganClass> {
    name.parse().map_err(to_py)
}

#[pyclass(name = "EllipseParams", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyEllipse(geometry::EllipseParams);

#[pymethods]
impl PyEllipse {
    #[new]
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> PyResult<Self> {
        geometry::EllipseParams::new(cx, cy, a, b, theta)
            .map(PyEllipse)
            .map_err(to_py)
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }

    #[getter]
    fn a(&self) -> f64 {
        self.0.a
    }

    #[getter]
    fn b(&self) -> f64 {
        self.0.b
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta
    }

    fn circumference(&self) -> PyResult<f64> {
        geometry::ellipse_circumference(&self.0).map_err(to_py)
    }

    /// Filled (or outline) mask as a flat list of 0/1 values.
    #[pyo3(signature = (width, height, filled = true))]
    fn rasterize(&self, width: usize, height: usize, filled: bool) -> Vec<u8> {
        let m = geometry::rasterize_ellipse_mask(&self.0, width, height, filled, None);
        m.bits().iter().map(|&b| b as u8).collect()
    }

    fn __repr__(&self) -> String {
        let e = self.0;
        format!(
            "EllipseParams(cx={}, cy={}, a={}, b={}, theta={})",
            e.cx, e.cy, e.a, e.b, e.theta
        )
    }
}

#[pyclass(name = "RectParams", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyRect(geometry::RectParams);

#[pymethods]
impl PyRect {
    #[getter]
    fn center(&self) -> (f64, f64) {
        self.0.center
    }

    #[getter]
    fn length(&self) -> f64 {
        self.0.length
    }

    #[getter]
    fn breadth(&self) -> f64 {
        self.0.breadth
    }

    #[getter]
    fn angle(&self) -> f64 {
        self.0.angle
    }

    fn __repr__(&self) -> String {
        let r = self.0;
        format!(
            "RectParams(center={:?}, length={}, breadth={}, angle={})",
            r.center, r.length, r.breadth, r.angle
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel(fetometry::Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (depth = 3, base = 8, size = 64, seed = 0))]
    fn new(depth: usize, base: usize, size: usize, seed: u64) -> PyResult<Self> {
        let cfg = UNetConfig {
            depth,
            base_channels: base,
            input_size: size,
            ..UNetConfig::default()
        };
        fetometry::Model::new(cfg, seed).map(PyModel).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_model(path).map(PyModel).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.0.config().input_size
    }

    /// `images` holds `n` row-major `size × size` images. Returns the flat
    /// segmentation logits and the `[n, 3]` class logits.
    fn predict(&self, images: Vec<f64>, n: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let s = self.0.config().input_size;
        let t = Tensor::new(&[n, 1, s, s], images).map_err(to_py)?;
        let (seg, cls) = self.0.predict(&t).map_err(to_py)?;
        Ok((seg.data().to_vec(), cls.data().to_vec()))
    }
}

#[pyfunction]
fn ellipse_circumference(a: f64, b: f64) -> PyResult<f64> {
    let e = geometry::EllipseParams::new(0.0, 0.0, a, b, 0.0).map_err(to_py)?;
    geometry::ellipse_circumference(&e).map_err(to_py)
}

#[pyfunction]
fn fit_ellipse(points: Vec<(f64, f64)>) -> PyResult<PyEllipse> {
    geometry::fit_ellipse(&points).map(PyEllipse).map_err(to_py)
}

#[pyfunction]
fn fit_ellipse_mask(width: usize, height: usize, values: Vec<u8>) -> PyResult<PyEllipse> {
    geometry::fit_ellipse_mask(&mask(width, height, values)?)
        .map(PyEllipse)
        .map_err(to_py)
}

#[pyfunction]
fn min_area_rect(points: Vec<(f64, f64)>) -> PyResult<PyRect> {
    geometry::min_area_rect(&points).map(PyRect).map_err(to_py)
}

#[pyfunction]
fn fit_min_rect(width: usize, height: usize, values: Vec<u8>) -> PyResult<PyRect> {
    geometry::fit_min_rect(&mask(width, height, values)?)
        .map(PyRect)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (width, height, values, organ_name, spacing_mm = 0.5))]
fn estimate_biometric(
    width: usize,
    height: usize,
    values: Vec<u8>,
    organ_name: &str,
    spacing_mm: f64,
) -> PyResult<f64> {
    eval::estimate_biometric(&mask(width, height, values)?, organ(organ_name)?, spacing_mm).map_err(to_py)
}

/// Writes a dataset and returns the number of samples.
#[pyfunction]
#[pyo3(signature = (out, subjects = 50, per_subject = 6, size = 64, seed = 0, annotate = false))]
fn generate_dataset(
    out: PathBuf,
    subjects: usize,
    per_subject: usize,
    size: usize,
    seed: u64,
    annotate: bool,
) -> PyResult<usize> {
    let opts = GenOptions {
        n_subjects: subjects,
        scans_per_subject: per_subject,
        size,
        seed,
        annotate,
    };
    synth::generate_dataset(&out, &opts)
        .map(|d| d.samples.len())
        .map_err(to_py)
}

/// `(epoch, lr, l_cls, l_seg, l_joint)`
type EpochRow = (usize, f64, f64, f64, f64);

/// Trains a fresh model on the train split. Returns the model and one
/// `(epoch, lr, l_cls, l_seg, l_joint)` tuple per epoch.
#[pyfunction]
#[pyo3(signature = (data, lambda_ = 0.001, epochs = 30, batch = 16, lr = 5e-4, decay = 0.97, seed = 0, depth = 3, base = 8))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: PathBuf,
    lambda_: f64,
    epochs: usize,
    batch: usize,
    lr: f64,
    decay: f64,
    seed: u64,
    depth: usize,
    base: usize,
) -> PyResult<(PyModel, Vec<EpochRow>)> {
    let cfg = TrainConfig {
        lambda: lambda_,
        lr0: lr,
        decay_gamma: decay,
        epochs,
        batch_size: batch,
        seed,
    };
    py.detach(|| {
        let d = synth::load_dataset(&data)?;
        let size = d
            .image_size()
            .ok_or_else(|| Error::Consistency("dataset has no samples".into()))?;
        let unet = UNetConfig {
            depth,
            base_channels: base,
            input_size: size,
            ..UNetConfig::default()
        };
        let mut model = fetometry::Model::new(unet, seed)?;
        let hist = training::train(&mut model, &d.split(Split::Train), &cfg)?;
        let rows = hist
            .iter()
            .map(|r| (r.epoch, r.lr, r.l_cls, r.l_seg, r.l_joint))
            .collect();
        Ok((PyModel(model), rows))
    })
    .map_err(to_py)
}

/// Returns `(accuracy_pct, {organ: (mae_mm, std_mm, failed)})` on the test
/// split.
#[pyfunction]
#[pyo3(signature = (model, data, routing = "predicted"))]
#[allow(clippy::type_complexity)]
fn evaluate(
    model: &PyModel,
    data: PathBuf,
    routing: &str,
) -> PyResult<(f64, HashMap<String, (Option<f64>, Option<f64>, usize)>)> {
    let routing: Routing = routing.parse().map_err(to_py)?;
    let d = synth::load_dataset(&data).map_err(to_py)?;
    let opts = EvalOptions {
        routing,
        ..EvalOptions::default()
    };
    let (_, row) = eval::evaluate(&model.0, &d.split(Split::Test), &opts).map_err(to_py)?;
    let per = OrganClass::ALL
        .iter()
        .map(|&o| {
            let c = row.class(o);
            (o.name().to_string(), (c.mae_mm, c.std_mm, c.failed))
        })
        .collect();
    Ok((row.accuracy_pct, per))
}

/// `(name, seed, max_rel_err, tol)` for every finite-difference check.
#[pyfunction]
fn gradient_suite(py: Python<'_>, seeds: Vec<u64>) -> PyResult<Vec<(String, u64, f64, f64)>> {
    let entries = py.detach(|| training::gradient_suite(&seeds)).map_err(to_py)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.name, e.seed, e.max_rel_err, e.tol))
        .collect())
}

/// Runs the command-line interface and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("fetometry".to_string()).chain(args).collect();
    py.detach(|| fetometry::cli::run(argv, &mut std::io::stdout(), &mut std::io::stderr()))
}

#[pymodule(name = "fetometry")]
pub mod fetometry_module {
    #[pymodule_export]
    use super::{
        ellipse_circumference, estimate_biometric, evaluate, fit_ellipse, fit_ellipse_mask, fit_min_rect,
        generate_dataset, gradient_suite, min_area_rect, run_cli, train, FitError, PyEllipse, PyModel, PyRect,
    };
}
