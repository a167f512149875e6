//! Python bindings: synthetic data, cropping geometry, metrics, models and training.
//!
//! Images cross the boundary as flat row-major lists plus `(height, width)`.

use std::path::Path;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use crocnet::data::{synth_case as synth_one, synth_generate as synth_many, DatasetIndex, SynthConfig};
use crocnet::gradcheck::{run_check, GradCheckOptions};
use crocnet::infer::{run_pipeline, Stage1Model, Stage2Model};
use crocnet::metrics;
use crocnet::networks::{self, UNetConfig};
use crocnet::pipeline::{self, Bbox, Connectivity, CropConfig, NUM_CLASSES};
use crocnet::train::{train as train_any, TrainConfig};
use crocnet::{Error, Tensor};

type BboxTuple = (usize, usize, usize, usize);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image_tensor(image: Vec<f32>, height: usize, width: usize) -> PyResult<Tensor<f32>> {
    Tensor::new(&[1, 1, height, width], image).map_err(py_err)
}

fn to_bbox(b: BboxTuple) -> Bbox {
    Bbox {
        row_min: b.0,
        row_max: b.1,
        col_min: b.2,
        col_max: b.3,
    }
}

fn from_bbox(b: &Bbox) -> BboxTuple {
    (b.row_min, b.row_max, b.col_min, b.col_max)
}

fn crop_config(shift: usize, connectivity: u8, pad_to_multiple: usize) -> PyResult<CropConfig> {
    let cfg = CropConfig {
        shift,
        connectivity: Connectivity::try_from(connectivity).map_err(py_err)?,
        pad_to_multiple,
        ..Default::default()
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// One synthetic case: `(image, labels, height, width, phase)`.
#[pyfunction]
#[pyo3(signature = (seed, id, side = 64))]
fn synth_case(seed: u64, id: u64, side: usize) -> PyResult<(Vec<f32>, Vec<u8>, usize, usize, String)> {
    let cfg = SynthConfig { side, ..Default::default() };
    let case = synth_one(&cfg, seed, id).map_err(py_err)?;
    Ok((
        case.image.data().to_vec(),
        case.label.data.clone(),
        case.label.height,
        case.label.width,
        format!("{:?}", case.phase),
    ))
}

/// Write a synthetic dataset; returns the index path.
#[pyfunction]
#[pyo3(signature = (out_dir, cases, seed = 0, side = 64))]
fn synth_generate(out_dir: &str, cases: usize, seed: u64, side: usize) -> PyResult<String> {
    let cfg = SynthConfig { side, ..Default::default() };
    synth_many(&cfg, cases, seed, out_dir).map_err(py_err)?;
    Ok(Path::new(out_dir).join("index.json").display().to_string())
}

/// Component labels (0 = background) and sizes; `sizes[k]` belongs to label `k + 1`.
#[pyfunction]
#[pyo3(signature = (mask, height, width, connectivity = 8))]
fn connected_components(mask: Vec<bool>, height: usize, width: usize, connectivity: u8) -> PyResult<(Vec<u32>, Vec<usize>)> {
    let conn = Connectivity::try_from(connectivity).map_err(py_err)?;
    let c = pipeline::connected_components(&mask, height, width, conn).map_err(py_err)?;
    Ok((c.labels, c.sizes))
}

/// Expand `(row_min, row_max, col_min, col_max)` by `shift`, pad and clamp to the image.
#[pyfunction]
#[pyo3(signature = (bbox, height, width, shift = 15, pad_to_multiple = 16))]
fn expand_clamp(bbox: BboxTuple, height: usize, width: usize, shift: usize, pad_to_multiple: usize) -> PyResult<BboxTuple> {
    let cfg = crop_config(shift, 8, pad_to_multiple)?;
    Ok(from_bbox(&pipeline::expand_clamp(to_bbox(bbox), &cfg, height, width)))
}

/// Heart bbox from a background probability map; the flag marks the full-frame fallback.
#[pyfunction]
#[pyo3(signature = (background, height, width, shift = 15, connectivity = 8, pad_to_multiple = 16))]
fn detect_heart(
    background: Vec<f32>,
    height: usize,
    width: usize,
    shift: usize,
    connectivity: u8,
    pad_to_multiple: usize,
) -> PyResult<(BboxTuple, bool)> {
    let cfg = crop_config(shift, connectivity, pad_to_multiple)?;
    let d = pipeline::detect_heart(&image_tensor(background, height, width)?, &cfg).map_err(py_err)?;
    Ok((from_bbox(&d.bbox), d.fallback))
}

#[pyfunction]
fn dice_score(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    metrics::dice_score(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, height, width, spacing = (1.0, 1.0)))]
fn hausdorff(a: Vec<bool>, b: Vec<bool>, height: usize, width: usize, spacing: (f64, f64)) -> PyResult<f64> {
    metrics::hausdorff(&a, &b, height, width, [spacing.0, spacing.1]).map_err(py_err)
}

/// Learnable parameter count for stage 1 or 2, optionally with custom widths.
#[pyfunction]
#[pyo3(signature = (stage = 1, channels = None))]
fn param_count(stage: u8, channels: Option<Vec<usize>>) -> PyResult<usize> {
    let mut cfg = match stage {
        1 => UNetConfig::e2aunet(),
        2 => UNetConfig::specialist(),
        s => return Err(PyValueError::new_err(format!("stage must be 1 or 2, got {s}"))),
    };
    if let Some(c) = channels {
        cfg.stage_channels = c;
    }
    cfg.validate().map_err(py_err)?;
    Ok(networks::param_count(&cfg))
}

/// Run one registered gradient check: `(passed, max_rel_error)`.
#[pyfunction]
fn gradcheck(name: &str) -> PyResult<(bool, f64)> {
    let r = run_check(name, &GradCheckOptions::default()).map_err(py_err)?;
    Ok((r.passed, r.max_rel_error))
}

/// Train from a JSON config against a dataset index; returns the best validation Dice.
#[pyfunction]
fn train(config_json: &str, index_path: &str, out_dir: &str) -> PyResult<f64> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    let cases = DatasetIndex::load(index_path).and_then(|i| i.load_all::<f32>()).map_err(py_err)?;
    let report = train_any(&cfg, &cases, Path::new(out_dir)).map_err(py_err)?;
    Ok(report.best_val_dice)
}

/// Stage-1 network loaded from a checkpoint.
#[pyclass(unsendable)]
struct Stage1 {
    model: Stage1Model<f32>,
}

#[pymethods]
impl Stage1 {
    #[new]
    fn new(checkpoint: &str) -> PyResult<Self> {
        let model = Stage1Model::load(checkpoint, Default::default()).map_err(py_err)?;
        Ok(Self { model })
    }

    /// Sigmoid maps, channel-major `(4 * height * width)`.
    fn predict(&mut self, image: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        let pred = self.model.predict(&image_tensor(image, height, width)?).map_err(py_err)?;
        Ok(pred.data().to_vec())
    }

    /// Argmax class map over the four channels.
    fn labels(&mut self, image: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let pred = self.model.predict(&image_tensor(image, height, width)?).map_err(py_err)?;
        Ok(pipeline::argmax_labels(&pred).map_err(py_err)?.data)
    }

    #[getter]
    fn channels(&self) -> usize {
        NUM_CLASSES
    }
}

/// Two-stage pipeline: stage-1 detection, crop and weight-shared specialists.
#[pyclass(unsendable)]
struct Pipeline {
    stage1: Stage1Model<f32>,
    stage2: Stage2Model<f32>,
    crop: CropConfig,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (stage1, stage2, shift = 15))]
    fn new(stage1: &str, stage2: &str, shift: usize) -> PyResult<Self> {
        Ok(Self {
            stage1: Stage1Model::load(stage1, Default::default()).map_err(py_err)?,
            stage2: Stage2Model::load(stage2, Default::default()).map_err(py_err)?,
            crop: crop_config(shift, 8, 16)?,
        })
    }

    /// Final class map, the crop bbox and the fallback flag.
    fn run(&mut self, image: Vec<f32>, height: usize, width: usize) -> PyResult<(Vec<u8>, BboxTuple, bool)> {
        let image = image_tensor(image, height, width)?;
        let out = run_pipeline(&mut self.stage1, &mut self.stage2, &image, &self.crop).map_err(py_err)?;
        Ok((out.labels.data, from_bbox(&out.detection.bbox), out.detection.fallback))
    }
}

#[pymodule]
fn crocnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_case, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(connected_components, m)?)?;
    m.add_function(wrap_pyfunction!(expand_clamp, m)?)?;
    m.add_function(wrap_pyfunction!(detect_heart, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Stage1>()?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
