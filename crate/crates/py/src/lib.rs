//! Python bindings. Images travel as flat row-major lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use colocam::benchmark::Variant;
use colocam::geometry::{self as geo, ConcatDirection};
use colocam::lattice;
use colocam::losses::{self, Backend, ColocMode, KernelConfig};
use colocam::{eval, pseudo_labels, synth, trainer};

fn err(e: colocam::Error) -> PyErr {
    match e {
        colocam::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn backend(exact: bool) -> Backend {
    if exact {
        Backend::Exact
    } else {
        Backend::Lattice
    }
}

fn kernel(spatial: f64, color: f64, shifts: usize) -> KernelConfig {
    KernelConfig {
        spatial_bandwidth: spatial,
        color_bandwidth: color,
        shifts,
    }
}

#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone)]
struct PyBBox(geo::BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> PyResult<Self> {
        geo::BBox::new(x_min, y_min, x_max, y_max)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn coords(&self) -> (usize, usize, usize, usize) {
        (self.0.x_min, self.0.y_min, self.0.x_max, self.0.y_max)
    }

    fn area(&self) -> usize {
        self.0.area()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (a, b, c, d) = self.coords();
        format!("BBox({a}, {b}, {c}, {d})")
    }
}

/// An RGB frame with channels on the `[0, 255]` scale.
#[pyclass(name = "Frame", frozen)]
struct PyFrame(geo::Frame);

#[pymethods]
impl PyFrame {
    #[new]
    fn new(height: usize, width: usize, pixels: Vec<[f64; 3]>) -> PyResult<Self> {
        geo::Frame::new(height, width, pixels)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn pixels(&self) -> Vec<[f64; 3]> {
        self.0.pixels().to_vec()
    }
}

/// Background/foreground map pair.
#[pyclass(name = "CamPair", frozen)]
struct PyCamPair(geo::CamPair);

#[pymethods]
impl PyCamPair {
    #[new]
    fn new(height: usize, width: usize, maps: Vec<[f64; 2]>) -> PyResult<Self> {
        geo::CamPair::new(height, width, maps)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_foreground(height: usize, width: usize, fg: Vec<f64>) -> PyResult<Self> {
        geo::CamPair::from_foreground(height, width, &fg)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    fn maps(&self) -> Vec<[f64; 2]> {
        self.0.maps().to_vec()
    }
}

/// A loss value with its per-pixel `[d/ds0, d/ds1]` gradient.
#[pyclass(name = "LossValue", frozen, get_all)]
struct PyLossValue {
    value: f64,
    grad: Vec<[f64; 2]>,
    degenerate: bool,
}

impl From<losses::LossValue> for PyLossValue {
    fn from(v: losses::LossValue) -> Self {
        Self {
            value: v.value,
            grad: v.grad,
            degenerate: v.degenerate,
        }
    }
}

/// Approximate Gaussian filtering on shifted permutohedral lattices.
#[pyclass(name = "GaussianFilter", frozen)]
struct PyGaussianFilter(lattice::GaussianFilter);

#[pymethods]
impl PyGaussianFilter {
    #[new]
    #[pyo3(signature = (features, shifts = lattice::DEFAULT_SHIFTS))]
    fn new(features: Vec<Vec<f64>>, shifts: usize) -> PyResult<Self> {
        lattice::GaussianFilter::with_shifts(&features, shifts)
            .map(Self)
            .map_err(err)
    }

    #[pyo3(signature = (values, channels = 1))]
    fn filter(&self, values: Vec<f64>, channels: usize) -> PyResult<Vec<f64>> {
        self.0.filter(&values, channels).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
#[pyo3(signature = (features, values, channels = 1))]
fn brute_force_filter(
    features: Vec<Vec<f64>>,
    values: Vec<f64>,
    channels: usize,
) -> PyResult<Vec<f64>> {
    lattice::brute_force_filter(&features, &values, channels).map_err(err)
}

/// Labels as `(pixel, label)` with label 1 for foreground, 0 for background.
#[pyfunction]
fn partial_cross_entropy(labels: Vec<(usize, u8)>, cam: &PyCamPair) -> PyResult<PyLossValue> {
    let entries: Vec<(usize, geo::Label)> = labels
        .into_iter()
        .map(|(p, l)| match l {
            0 => Ok((p, geo::Label::Background)),
            1 => Ok((p, geo::Label::Foreground)),
            _ => Err(PyValueError::new_err(format!(
                "label {l} is neither 0 nor 1"
            ))),
        })
        .collect::<PyResult<_>>()?;
    let mask =
        geo::PartialMask::from_labels(cam.0.height(), cam.0.width(), &entries).map_err(err)?;
    losses::partial_cross_entropy(&mask, &cam.0)
        .map(Into::into)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (cam, frame, spatial = 100.0, color = 15.0, shifts = 1, exact = false))]
fn crf_frame_loss(
    cam: &PyCamPair,
    frame: &PyFrame,
    spatial: f64,
    color: f64,
    shifts: usize,
    exact: bool,
) -> PyResult<PyLossValue> {
    losses::crf_frame_loss_with(
        &cam.0,
        &frame.0,
        &kernel(spatial, color, shifts),
        backend(exact),
        [0.0, 0.0],
    )
    .map(Into::into)
    .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (frames, cams, color = 15.0, shifts = 1, exact = false, vertical = false))]
fn coloc_loss(
    frames: Vec<PyRef<'_, PyFrame>>,
    cams: Vec<PyRef<'_, PyCamPair>>,
    color: f64,
    shifts: usize,
    exact: bool,
    vertical: bool,
) -> PyResult<PyLossValue> {
    let dir = if vertical {
        ConcatDirection::Vertical
    } else {
        ConcatDirection::Horizontal
    };
    let fs =
        geo::FrameSequence::new(frames.iter().map(|f| f.0.clone()).collect(), dir).map_err(err)?;
    let cs = geo::CamSequence::new(cams.iter().map(|c| c.0.clone()).collect(), dir).map_err(err)?;
    losses::coloc_loss_with(&fs, &cs, &kernel(100.0, color, shifts), backend(exact))
        .map(Into::into)
        .map_err(err)
}

#[pyfunction]
fn size_barrier_loss(cam: &PyCamPair, z: f64) -> PyResult<PyLossValue> {
    losses::size_barrier_loss(&cam.0, z)
        .map(Into::into)
        .map_err(err)
}

/// `(threshold, level, degenerate)` for values in `[0, 1]`.
#[pyfunction]
fn otsu(values: Vec<f64>) -> PyResult<(f64, Option<usize>, bool)> {
    let o = pseudo_labels::otsu_values(&values).map_err(err)?;
    Ok((o.threshold, o.level, o.degenerate))
}

#[pyfunction]
fn extract_bbox(values: Vec<f64>, height: usize, width: usize) -> PyResult<PyBBox> {
    eval::extract_bbox(&values, height, width)
        .map(|e| PyBBox(e.bbox))
        .map_err(err)
}

#[pyfunction]
fn iou(a: &PyBBox, b: &PyBBox) -> f64 {
    eval::iou(&a.0, &b.0)
}

#[pyfunction]
fn corloc(preds: Vec<PyBBox>, gts: Vec<PyBBox>) -> PyResult<f64> {
    let p: Vec<geo::BBox> = preds.into_iter().map(|b| b.0).collect();
    let g: Vec<geo::BBox> = gts.into_iter().map(|b| b.0).collect();
    eval::corloc(&p, &g).map_err(err)
}

/// A generated clip.
#[pyclass(name = "SynthVideo", frozen)]
struct PySynthVideo(synth::SynthVideo);

#[pymethods]
impl PySynthVideo {
    fn __len__(&self) -> usize {
        self.0.frames.len()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.frames.height(), self.0.frames.width())
    }

    fn frame(&self, t: usize) -> PyResult<PyFrame> {
        self.0
            .frames
            .frames()
            .get(t)
            .map(|f| PyFrame(f.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("frame {t} out of range")))
    }

    fn seeds(&self) -> Vec<Vec<f64>> {
        self.0.seeds.iter().map(|s| s.values().to_vec()).collect()
    }

    fn boxes(&self) -> Vec<PyBBox> {
        self.0.boxes.iter().map(|&b| PyBBox(b)).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (frames = 32, height = 64, width = 64, motion = "linear", speed = 1.5, under_activation = 0.5, seed = 0))]
fn generate(
    frames: usize,
    height: usize,
    width: usize,
    motion: &str,
    speed: f64,
    under_activation: f64,
    seed: u64,
) -> PyResult<PySynthVideo> {
    let cfg = synth::SynthConfig {
        frames,
        height,
        width,
        extent: (height.min(width) as f64 / 7.0).max(1.0),
        motion: motion.parse().map_err(err)?,
        speed,
        under_activation,
        seed,
        ..synth::SynthConfig::default()
    };
    synth::generate(&cfg).map(PySynthVideo).map_err(err)
}

/// Fits one clip; returns `(foreground maps, log CSV)`.
#[pyfunction]
#[pyo3(signature = (video, n_frames = 4, epochs = 10, lambda_c = 1.0, lambda_c_mode = "adaptive", variant = "full", seed = 0, timing = false))]
#[allow(clippy::too_many_arguments)]
fn train(
    video: &PySynthVideo,
    n_frames: usize,
    epochs: usize,
    lambda_c: f64,
    lambda_c_mode: &str,
    variant: &str,
    seed: u64,
    timing: bool,
) -> PyResult<(Vec<Vec<f64>>, String)> {
    let variant: Variant = variant.parse().map_err(err)?;
    let base = trainer::TrainConfig {
        n_frames,
        epochs,
        lambda_c,
        lambda_c_mode: lambda_c_mode.parse::<ColocMode>().map_err(err)?,
        seed,
        timing,
        ..trainer::TrainConfig::default()
    };
    let out =
        trainer::train(&video.0.frames, &video.0.seeds, &variant.apply(&base)).map_err(err)?;
    let maps = (0..out.logits.len())
        .map(|t| out.logits.foreground(t))
        .collect();
    Ok((maps, out.log.to_csv()))
}

/// `min(z_init * z_factor^epoch, z_max)` with the default schedule.
#[pyfunction]
fn z_schedule(epoch: usize) -> f64 {
    trainer::z_schedule(&trainer::TrainConfig::default(), epoch)
}

#[pymodule(name = "colocam")]
mod module {
    #[pymodule_export]
    use super::{
        brute_force_filter, coloc_loss, corloc, crf_frame_loss, extract_bbox, generate, iou, otsu,
        partial_cross_entropy, size_barrier_loss, train, z_schedule, PyBBox, PyCamPair, PyFrame,
        PyGaussianFilter, PyLossValue, PySynthVideo,
    };
}
