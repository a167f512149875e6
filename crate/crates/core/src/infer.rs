//! Model loading and the two-stage prediction pipeline.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::attention::QueryKeyProduct;
use crate::autograd::{Mode, Tape};
use crate::data::{write_label_map, write_tensor, Case, DatasetIndex, TensorData};
use crate::error::{Error, Result};
use crate::networks::{E2AUNet, Specialists, UNetConfig};
use crate::params::{read_checkpoint, ParamStore};
use crate::pipeline::{argmax_labels, crop_and_binarize, detect_heart, paste_back, BboxRecord, CropConfig, Detection, LabelMap};
use crate::tensor::{Scalar, Tensor};

/// Recover the network shape from a checkpoint's embedding and head weights.
pub fn config_from_entries<T: Scalar>(entries: &[(String, Tensor<T>)], product: QueryKeyProduct) -> Result<UNetConfig> {
    let shape = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| Error::Validation(format!("checkpoint has no {name}")))
    };
    let embed = shape("stage0.embed.weight")?;
    let head = shape("head.weight")?;
    if embed.len() != 4 || head.len() != 4 {
        return Err(Error::Validation("checkpoint weights are not convolution kernels".into()));
    }
    let mut cfg = UNetConfig::with(embed[1], head[0], UNetConfig::doubling(embed[0]));
    cfg.product = product;
    Ok(cfg)
}

pub struct Stage1Model<T> {
    pub net: E2AUNet,
    pub store: ParamStore<T>,
}

pub struct Stage2Model<T> {
    pub net: Specialists,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Stage1Model<T> {
    pub fn load(path: impl AsRef<Path>, product: QueryKeyProduct) -> Result<Self> {
        let entries = read_checkpoint::<T>(fs::File::open(path)?)?;
        let cfg = config_from_entries(&entries, product)?;
        if (cfg.in_channels, cfg.out_channels) != (1, 4) {
            return Err(Error::Validation("checkpoint is not a stage-1 network".into()));
        }
        let mut store = ParamStore::new();
        let net = E2AUNet::new(&mut store, cfg, 0)?;
        store.load_entries(entries)?;
        Ok(Self { net, store })
    }

    /// Eval-mode sigmoid maps `[1, 4, H, W]`.
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.net.forward(&mut tape, &mut self.store, x, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Stage2Model<T> {
    pub fn load(path: impl AsRef<Path>, product: QueryKeyProduct) -> Result<Self> {
        let entries = read_checkpoint::<T>(fs::File::open(path)?)?;
        let cfg = config_from_entries(&entries, product)?;
        if (cfg.in_channels, cfg.out_channels) != (2, 1) {
            return Err(Error::Validation("checkpoint is not a specialist network".into()));
        }
        let mut store = ParamStore::new();
        let net = Specialists::new(&mut store, cfg, 0)?;
        store.load_entries(entries)?;
        Ok(Self { net, store })
    }
}

pub struct PipelineOutput<T> {
    pub stage1: Tensor<T>,
    pub stage1_labels: LabelMap,
    pub detection: Detection,
    pub labels: LabelMap,
}

/// Detect, crop and refine, starting from a given stage-1 prediction.
pub fn refine<T: Scalar>(
    stage2: &mut Stage2Model<T>,
    image: &Tensor<T>,
    stage1: &Tensor<T>,
    crop_cfg: &CropConfig,
) -> Result<(Detection, LabelMap)> {
    let (_, _, h, w) = stage1.nchw()?;
    let bg = Tensor::new(&[1, 1, h, w], stage1.data()[..h * w].to_vec())?;
    let detection = detect_heart(&bg, crop_cfg)?;
    let crop = crop_and_binarize(image, stage1, &detection.bbox)?;
    let mut tape = Tape::new();
    let [m_lv, m_rv, m_myo] = stage2.net.forward(
        &mut tape,
        &mut stage2.store,
        &crop.image,
        [&crop.masks[0], &crop.masks[1], &crop.masks[2]],
        Mode::Eval,
    )?;
    let masks = [tape.value(m_lv), tape.value(m_rv), tape.value(m_myo)];
    let labels = paste_back(masks, &detection.bbox, h, w)?;
    Ok((detection, labels))
}

pub fn run_pipeline<T: Scalar>(
    stage1: &mut Stage1Model<T>,
    stage2: &mut Stage2Model<T>,
    image: &Tensor<T>,
    crop_cfg: &CropConfig,
) -> Result<PipelineOutput<T>> {
    let pred = stage1.predict(image)?;
    let stage1_labels = argmax_labels(&pred)?;
    let (detection, labels) = refine(stage2, image, &pred, crop_cfg)?;
    Ok(PipelineOutput {
        stage1: pred,
        stage1_labels,
        detection,
        labels,
    })
}

fn soft_maps<T: Scalar>(pred: &Tensor<T>) -> Result<TensorData> {
    let (_, c, h, w) = pred.nchw()?;
    Ok(TensorData::F32(pred.cast::<f32>().reshape(&[c, h, w])?))
}

/// Stage-1 inference over a dataset: `{id}_soft.ctf` (4, H, W) and `{id}_labels.ctf` (H, W).
pub fn infer_stage1<T: Scalar>(model: &mut Stage1Model<T>, cases: &[Case<T>], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for case in cases {
        let pred = model.predict(&case.image)?;
        write_tensor(&soft_maps(&pred)?, out_dir.join(format!("{}_soft.ctf", case.id)))?;
        write_label_map(&argmax_labels(&pred)?, out_dir.join(format!("{}_labels.ctf", case.id)))?;
    }
    Ok(())
}

/// Two-stage inference: `{id}_labels.ctf` per case plus `bbox.jsonl`.
pub fn infer_pipeline<T: Scalar>(
    stage1: &mut Stage1Model<T>,
    stage2: &mut Stage2Model<T>,
    cases: &[Case<T>],
    crop_cfg: &CropConfig,
    out_dir: &Path,
) -> Result<Vec<BboxRecord>> {
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(cases.len());
    let mut log = fs::File::create(out_dir.join("bbox.jsonl"))?;
    for case in cases {
        let out = run_pipeline(stage1, stage2, &case.image, crop_cfg)?;
        write_label_map(&out.labels, out_dir.join(format!("{}_labels.ctf", case.id)))?;
        let rec = BboxRecord::new(&case.id, &out.detection);
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_cases<T: Scalar>(index_path: &Path) -> Result<Vec<Case<T>>> {
    DatasetIndex::load(index_path)?.load_all()
}
