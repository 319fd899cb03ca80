//! Python bindings: flat-buffer wrappers around the core types plus the
//! operations a notebook needs (phantom generation, preprocessing, loss
//! evaluation, segmentation, metrics).
//!
//! Arrays cross the boundary as flat lists plus an explicit shape, in
//! C-order (x, y, z) or (class, x, y, z); no numpy dependency.

use ndarray::{Array3, Array4};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tbadseg::losses::{LossInputs, LossKind};
use tbadseg::metrics;
use tbadseg::networks::{SegArchitecture, Segmenter, SegmenterConfig};
use tbadseg::phantom::{generate_phantom as phantom_case, PhantomSpec};
use tbadseg::pipelines::{run_single_step, PipelineConfig, PipelineKind};
use tbadseg::preprocess::PreprocessConfig;
use tbadseg::training::{train_step, TrainConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn shape3(shape: &[usize]) -> PyResult<(usize, usize, usize)> {
    match shape {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(PyValueError::new_err(format!("expected 3 axes, got {other:?}"))),
    }
}

/// A scalar image on a regular grid with mm spacing.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: tbadseg::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (data, shape, spacing, id = "case"))]
    fn new(data: Vec<f32>, shape: Vec<usize>, spacing: [f64; 3], id: &str) -> PyResult<Self> {
        let dims = shape3(&shape)?;
        let array = Array3::from_shape_vec(dims, data)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyVolume { inner: tbadseg::Volume::with_spacing(array, spacing, id).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.inner.shape()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// Voxel values, flattened in C-order.
    fn data(&self) -> Vec<f32> {
        self.inner.data.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Volume(id={:?}, shape={:?}, spacing={:?})", self.inner.id, self.inner.shape(), self.inner.spacing)
    }
}

/// An integer label map aligned with a [`Volume`]; classes 0..=3
/// (background, TL, FL, FLT).
#[pyclass(name = "LabelMap", from_py_object)]
#[derive(Clone)]
struct PyLabelMap {
    inner: tbadseg::LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    #[pyo3(signature = (data, shape, spacing, id = "case"))]
    fn new(data: Vec<u8>, shape: Vec<usize>, spacing: [f64; 3], id: &str) -> PyResult<Self> {
        let dims = shape3(&shape)?;
        let array = Array3::from_shape_vec(dims, data)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyLabelMap { inner: tbadseg::LabelMap::with_spacing(array, spacing, id).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> [usize; 3] {
        self.inner.shape()
    }

    #[getter]
    fn spacing(&self) -> [f64; 3] {
        self.inner.spacing
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    fn data(&self) -> Vec<u8> {
        self.inner.data.iter().copied().collect()
    }

    fn has_flt(&self) -> bool {
        self.inner.has_flt()
    }

    /// Voxel count per class, keyed by class index.
    fn class_counts(&self) -> std::collections::BTreeMap<u8, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for &v in self.inner.data.iter() {
            *counts.entry(v).or_insert(0) += 1;
        }
        counts
    }

    fn __repr__(&self) -> String {
        format!("LabelMap(id={:?}, shape={:?})", self.inner.id, self.inner.shape())
    }
}

/// Generate one synthetic dissection phantom with its exact label map.
#[pyfunction]
#[pyo3(signature = (seed = 0, shape = [64, 64, 64], flt_present = true))]
fn generate_phantom(seed: u64, shape: [usize; 3], flt_present: bool) -> PyResult<(PyVolume, PyLabelMap)> {
    let spec = PhantomSpec {
        shape,
        flt_present,
        seed,
        vessel_radius_mm: 8.0_f64.min(shape[0] as f64 * 1.5 / 5.0),
        arc_amplitude_mm: 4.0,
        ..PhantomSpec::default()
    };
    let (volume, label, _) = phantom_case(&spec).map_err(err)?;
    Ok((PyVolume { inner: volume }, PyLabelMap { inner: label }))
}

/// Clip/normalize intensities, resample to isotropic spacing and crop to
/// the foreground; the label, if given, follows the same grid.
#[pyfunction]
#[pyo3(signature = (volume, label = None, hu_min = -500.0, hu_max = 1000.0, target_spacing = 1.5))]
fn preprocess(
    volume: &PyVolume,
    label: Option<&PyLabelMap>,
    hu_min: f64,
    hu_max: f64,
    target_spacing: f64,
) -> PyResult<(PyVolume, Option<PyLabelMap>)> {
    let cfg = PreprocessConfig {
        hu_min,
        hu_max,
        target_spacing: [target_spacing; 3],
        ..PreprocessConfig::default()
    };
    let (v, l) =
        tbadseg::experiment::preprocess_case(&volume.inner, label.map(|l| &l.inner), &cfg)
            .map_err(err)?;
    Ok((PyVolume { inner: v }, l.map(|l| PyLabelMap { inner: l })))
}

/// Per-class Dice (TL, FL, FLT) plus FLT-presence flags for one case.
#[pyfunction]
fn case_metrics(pred: &PyLabelMap, gt: &PyLabelMap) -> PyResult<std::collections::BTreeMap<String, f64>> {
    let m = metrics::case_metrics(&pred.inner, &gt.inner).map_err(err)?;
    let mut out = std::collections::BTreeMap::new();
    for (slot, name) in [(0, "dice_tl"), (1, "dice_fl"), (2, "dice_flt")] {
        out.insert(name.to_string(), m.dice[slot]);
    }
    for (slot, name) in [(0, "hd_mm_tl"), (1, "hd_mm_fl"), (2, "hd_mm_flt")] {
        if let Some(v) = m.hd_mm[slot] {
            out.insert(name.to_string(), v);
        }
    }
    out.insert("gt_has_flt".to_string(), if m.gt_has_flt { 1.0 } else { 0.0 });
    out.insert("pred_has_flt".to_string(), if m.pred_has_flt { 1.0 } else { 0.0 });
    Ok(out)
}

/// Evaluate a loss on raw logits: `kind` is "dcel" or "gdl"; logits are
/// flat (class, x, y, z) in C-order.
#[pyfunction]
#[pyo3(signature = (kind, logits, classes, label))]
fn loss_value(kind: &str, logits: Vec<f32>, classes: usize, label: &PyLabelMap) -> PyResult<f64> {
    let kind = match kind {
        "dcel" => LossKind::Dcel,
        "gdl" => LossKind::Gdl,
        other => return Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
    };
    let [x, y, z] = label.inner.shape();
    let array = Array4::from_shape_vec((classes, x, y, z), logits)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let inputs = LossInputs::new(array.view(), &label.inner);
    let (loss, _) = kind.with_grad(&inputs).map_err(err)?;
    Ok(loss)
}

/// A trainable segmentation network ("unet3d" or "swin_unetr").
#[pyclass(name = "Segmenter", unsendable)]
struct PySegmenter {
    inner: Segmenter,
}

#[pymethods]
impl PySegmenter {
    #[new]
    #[pyo3(signature = (architecture = "unet3d", in_channels = 1, out_classes = 4, base_width = 16, depth = 4, window_size = 4, seed = 0))]
    fn new(
        architecture: &str,
        in_channels: usize,
        out_classes: usize,
        base_width: usize,
        depth: usize,
        window_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let architecture = match architecture {
            "unet3d" => SegArchitecture::Unet3d,
            "swin_unetr" => SegArchitecture::SwinUnetr,
            other => return Err(PyValueError::new_err(format!("unknown architecture {other:?}"))),
        };
        let cfg = SegmenterConfig {
            architecture,
            in_channels,
            out_classes,
            base_width,
            depth,
            window_size,
            seed,
        };
        Ok(PySegmenter { inner: Segmenter::new(cfg).map_err(err)? })
    }

    /// Number of trainable parameters.
    fn parameter_count(&self) -> usize {
        self.inner.params.names().map(|n| self.inner.params.value(n).len()).sum()
    }

    /// One Adam step on a whole volume; returns the loss.
    #[pyo3(signature = (volume, label, lr = 1e-4))]
    fn train_step(&mut self, volume: &PyVolume, label: &PyLabelMap, lr: f64) -> PyResult<f64> {
        let (d, h, w) = volume.inner.data.dim();
        let mut input = Array4::<f32>::zeros((1, d, h, w));
        input.index_axis_mut(ndarray::Axis(0), 0).assign(&volume.inner.data);
        train_step(&mut self.inner, &input, &label.inner, lr, &TrainConfig::default())
            .map_err(err)
    }

    /// Sliding-window single-step inference.
    #[pyo3(signature = (volume, patch_size = [96, 96, 96], overlap = 0.5))]
    fn predict(&self, volume: &PyVolume, patch_size: [usize; 3], overlap: f64) -> PyResult<PyLabelMap> {
        let mut cfg = PipelineConfig::new(PipelineKind::SingleStep);
        cfg.patch_size = patch_size;
        cfg.overlap = overlap;
        let (label, _) = run_single_step(&volume.inner, &self.inner, &cfg).map_err(err)?;
        Ok(PyLabelMap { inner: label })
    }
}

#[pymodule]
fn tbadseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_class::<PySegmenter>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(case_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(loss_value, m)?)?;
    Ok(())
}
