//! Training for both stages: Adam, step-decayed learning rate, Dice loss.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::QueryKeyProduct;
use crate::autograd::{Mode, Tape};
use crate::data::{augment, AugmentSpec, Case};
use crate::error::{cfg_err, Error, Result};
use crate::infer::{refine, Stage1Model, Stage2Model};
use crate::metrics::{dice_loss, dice_score, DICE_SMOOTHING};
use crate::networks::{E2AUNet, Specialists, UNetConfig};
use crate::params::{Adam, AdamConfig, ParamStore, StepSchedule};
use crate::pipeline::{argmax_labels, crop_and_binarize, detect_heart, BboxRecord, Crop, CropConfig, LabelMap, LV, MYO, RV};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub optimizer: String,
    pub loss: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out share; 0 evaluates on the training cases.
    pub val_fraction: f64,
    /// Validation Dice is computed every `eval_every` epochs and on the last one.
    pub eval_every: usize,
    pub augment: Option<AugmentSpec>,
    /// Network widths; `None` uses the stage default.
    pub stage_channels: Option<Vec<usize>>,
    pub product: QueryKeyProduct,
    pub dice_smoothing: f64,
    pub crop: CropConfig,
    pub stage1_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            epochs: 500,
            lr: 1e-4,
            lr_drops: vec![100, 200],
            lr_factor: 0.1,
            optimizer: "adam".into(),
            loss: "dice".into(),
            batch_size: 1,
            seed: 0,
            val_fraction: 0.25,
            eval_every: 1,
            augment: Some(AugmentSpec::default()),
            stage_channels: None,
            product: QueryKeyProduct::GlobalQuery,
            dice_smoothing: DICE_SMOOTHING,
            crop: CropConfig::default(),
            stage1_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(cfg_err!("lr must be positive"));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) || self.lr_drops.last().is_some_and(|&d| d >= self.epochs) {
            return Err(cfg_err!("lr_drops must ascend and stay below epochs ({})", self.epochs));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(cfg_err!("lr_factor must lie in (0, 1)"));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(cfg_err!("stage must be 1 or 2"));
        }
        if self.optimizer != "adam" || self.loss != "dice" {
            return Err(cfg_err!("only optimizer \"adam\" and loss \"dice\" are supported"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.epochs == 0 {
            return Err(cfg_err!("epochs, batch_size and eval_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(cfg_err!("val_fraction must lie in [0, 1)"));
        }
        self.crop.validate()?;
        self.network().validate()
    }

    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.lr,
            drops: self.lr_drops.clone(),
            factor: self.lr_factor,
        }
    }

    pub fn network(&self) -> UNetConfig {
        let mut cfg = if self.stage == 2 { UNetConfig::specialist() } else { UNetConfig::e2aunet() };
        if let Some(c) = &self.stage_channels {
            cfg.stage_channels = c.clone();
        }
        cfg.product = self.product;
        cfg
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub steps: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl TrainReport {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn loss_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_val_dice(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_dice)
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,loss,val_dice\n");
    for r in records {
        let dice = r.val_dice.map_or_else(String::new, |d| format!("{d:.8}"));
        let _ = writeln!(s, "{},{:e},{:.8},{dice}", r.epoch, r.lr, r.loss);
    }
    s
}

/// Mean Dice over LV, RV and MYO.
pub fn mean_class_dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let mut total = 0.0;
    for class in [LV, RV, MYO] {
        total += dice_score(&pred.class_mask(class), &gt.class_mask(class))?;
    }
    Ok(total / 3.0)
}

/// Seeded shuffle; the first `round(n * val_fraction)` indices are held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn stack_batch<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts[0].shape();
    let mut shape = first.to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
    for p in parts {
        if p.shape()[1..] != first[1..] {
            return Err(Error::Validation("cases in one batch must share their extent".into()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

struct Session<'a> {
    cfg: &'a TrainConfig,
    out_dir: &'a Path,
    records: Vec<EpochRecord>,
    best: Option<(usize, f64)>,
    steps: usize,
    adam: Adam,
}

impl<'a> Session<'a> {
    fn new(cfg: &'a TrainConfig, out_dir: &'a Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(Self {
            cfg,
            out_dir,
            records: Vec::new(),
            best: None,
            steps: 0,
            adam: Adam::new(AdamConfig::default()),
        })
    }

    fn step<T: Scalar>(&mut self, tape: Tape<T>, loss: crate::autograd::Var, store: &mut ParamStore<T>, lr: f64) -> Result<f64> {
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.steps)));
        }
        let grads = tape.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads)?;
        self.adam.step(store, lr)?;
        self.steps += 1;
        Ok(value)
    }

    fn wants_eval(&self, epoch: usize) -> bool {
        (epoch + 1) % self.cfg.eval_every == 0 || epoch + 1 == self.cfg.epochs
    }

    fn finish_epoch<T: Scalar>(&mut self, epoch: usize, lr: f64, loss: f64, val_dice: Option<f64>, store: &ParamStore<T>) -> Result<()> {
        log::info!(
            "epoch {epoch} lr {lr:e} loss {loss:.5}{}",
            val_dice.map_or_else(String::new, |d| format!(" val dice {d:.4}"))
        );
        if let Some(d) = val_dice {
            if self.best.is_none_or(|(_, b)| d > b) {
                self.best = Some((epoch, d));
                store.save(self.out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        self.records.push(EpochRecord {
            epoch,
            lr,
            loss,
            val_dice,
        });
        fs::write(self.out_dir.join(LOG_FILE), log_csv(&self.records))?;
        Ok(())
    }

    fn finish<T: Scalar>(self, store: &ParamStore<T>, train_ids: Vec<String>, val_ids: Vec<String>) -> Result<TrainReport> {
        store.save(self.out_dir.join(FINAL_CHECKPOINT))?;
        let (best_epoch, best_val_dice) = self.best.unwrap_or((0, 0.0));
        Ok(TrainReport {
            epochs: self.records,
            best_epoch,
            best_val_dice,
            steps: self.steps,
            train_ids,
            val_ids,
        })
    }
}

fn ids<T>(cases: &[Case<T>], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| cases[i].id.clone()).collect()
}

/// Train the stage-1 network; writes the log, config and checkpoints to `out_dir`.
pub fn train_stage1<T: Scalar>(cfg: &TrainConfig, cases: &[Case<T>], out_dir: &Path) -> Result<TrainReport> {
    if cfg.stage != 1 {
        return Err(Error::Usage("train_stage1 needs stage = 1".into()));
    }
    if cases.is_empty() {
        return Err(Error::Usage("no training cases".into()));
    }
    let mut session = Session::new(cfg, out_dir)?;
    let mut store = ParamStore::<T>::new();
    let net = E2AUNet::new(&mut store, cfg.network(), cfg.seed)?;
    let (train_idx, val_idx) = split_indices(cases.len(), cfg.val_fraction, cfg.seed);
    let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let targets: Vec<Tensor<T>> = cases.iter().map(|c| c.label.one_hot()).collect();
    let schedule = cfg.schedule();
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for (k, &i) in chunk.iter().enumerate() {
                match &cfg.augment {
                    Some(spec) => {
                        let seed = cfg.seed ^ ((epoch as u64) << 32) ^ ((b * cfg.batch_size + k) as u64);
                        let (img, lab) = augment(&cases[i].image, &cases[i].label, spec, seed)?;
                        images.push(img);
                        labels.push(lab.one_hot());
                    }
                    None => {
                        images.push(cases[i].image.clone());
                        labels.push(targets[i].clone());
                    }
                }
            }
            let mut tape = Tape::new();
            let x = tape.constant(stack_batch(&images)?);
            let y = tape.constant(stack_batch(&labels)?);
            let pred = net.forward(&mut tape, &mut store, x, Mode::Train)?;
            let loss = dice_loss(&mut tape, pred, y, cfg.dice_smoothing)?;
            loss_sum += session.step(tape, loss, &mut store, lr)?;
            batches += 1;
        }
        let val_dice = if session.wants_eval(epoch) {
            let mut model = Stage1Model { net: net.clone(), store };
            let mut total = 0.0;
            for &i in eval_idx {
                let pred = model.predict(&cases[i].image)?;
                total += mean_class_dice(&argmax_labels(&pred)?, &cases[i].label)?;
            }
            store = model.store;
            Some(total / eval_idx.len() as f64)
        } else {
            None
        };
        session.finish_epoch(epoch, lr, loss_sum / batches as f64, val_dice, &store)?;
    }
    log::info!("stage 1: {} steps in {:.1}s", session.steps, started.elapsed().as_secs_f64());
    session.finish(&store, ids(cases, &train_idx), ids(cases, &val_idx))
}

/// One stage-2 training sample: the crop, its initial masks and the cropped ground truth.
pub struct Stage2Sample<T> {
    pub id: String,
    pub crop: Crop<T>,
    /// `[3, 1, h, w]`: LV, RV, MYO.
    pub targets: Tensor<T>,
    pub record: BboxRecord,
}

/// Run stage 1, detect and crop every case.
pub fn prepare_stage2<T: Scalar>(stage1: &mut Stage1Model<T>, cases: &[Case<T>], crop_cfg: &CropConfig) -> Result<Vec<Stage2Sample<T>>> {
    cases
        .iter()
        .map(|case| {
            let pred = stage1.predict(&case.image)?;
            let (_, _, h, w) = pred.nchw()?;
            let bg = Tensor::new(&[1, 1, h, w], pred.data()[..h * w].to_vec())?;
            let detection = detect_heart(&bg, crop_cfg)?;
            let crop = crop_and_binarize(&case.image, &pred, &detection.bbox)?;
            let gt = case.label.crop(&detection.bbox);
            let plane = gt.height * gt.width;
            let targets = Tensor::from_fn(&[3, 1, gt.height, gt.width], |i| {
                if gt.data[i % plane] == (i / plane) as u8 + 1 {
                    T::one()
                } else {
                    T::zero()
                }
            });
            Ok(Stage2Sample {
                id: case.id.clone(),
                crop,
                targets,
                record: BboxRecord::new(&case.id, &detection),
            })
        })
        .collect()
}

/// Train the shared specialists on stage-1 crops, one case per step.
pub fn train_stage2<T: Scalar>(cfg: &TrainConfig, cases: &[Case<T>], out_dir: &Path) -> Result<TrainReport> {
    if cfg.stage != 2 {
        return Err(Error::Usage("train_stage2 needs stage = 2".into()));
    }
    let ckpt = cfg
        .stage1_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Usage("stage 2 needs stage1_checkpoint".into()))?;
    if !ckpt.is_file() {
        return Err(Error::Usage(format!("stage-1 checkpoint {} not found", ckpt.display())));
    }
    if cases.is_empty() {
        return Err(Error::Usage("no training cases".into()));
    }
    let mut session = Session::new(cfg, out_dir)?;
    let mut stage1 = Stage1Model::<T>::load(ckpt, cfg.product)?;
    let samples = prepare_stage2(&mut stage1, cases, &cfg.crop)?;
    let mut bbox_log = fs::File::create(out_dir.join("train_bbox.jsonl"))?;
    for s in &samples {
        writeln!(bbox_log, "{}", serde_json::to_string(&s.record)?)?;
    }
    let mut store = ParamStore::<T>::new();
    let net = Specialists::new(&mut store, cfg.network(), cfg.seed)?;
    let (train_idx, val_idx) = split_indices(cases.len(), cfg.val_fraction, cfg.seed);
    let eval_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let stage1_preds: Vec<Tensor<T>> = eval_idx.iter().map(|&i| stage1.predict(&cases[i].image)).collect::<Result<_>>()?;
    let schedule = cfg.schedule();
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut loss_sum = 0.0;
        for &i in &order {
            let s = &samples[i];
            let m = &s.crop.masks;
            let mut tape = Tape::new();
            let stacked = tape.constant(Specialists::stack_inputs(&s.crop.image, [&m[0], &m[1], &m[2]])?);
            let target = tape.constant(s.targets.clone());
            let pred = net.forward_stacked(&mut tape, &mut store, stacked, Mode::Train)?;
            let loss = dice_loss(&mut tape, pred, target, cfg.dice_smoothing)?;
            loss_sum += session.step(tape, loss, &mut store, lr)?;
        }
        let val_dice = if session.wants_eval(epoch) {
            let mut model = Stage2Model { net: net.clone(), store };
            let mut total = 0.0;
            for (k, &i) in eval_idx.iter().enumerate() {
                let (_, labels) = refine(&mut model, &cases[i].image, &stage1_preds[k], &cfg.crop)?;
                total += mean_class_dice(&labels, &cases[i].label)?;
            }
            store = model.store;
            Some(total / eval_idx.len() as f64)
        } else {
            None
        };
        session.finish_epoch(epoch, lr, loss_sum / order.len() as f64, val_dice, &store)?;
    }
    log::info!("stage 2: {} steps in {:.1}s", session.steps, started.elapsed().as_secs_f64());
    session.finish(&store, ids(cases, &train_idx), ids(cases, &val_idx))
}

pub fn train<T: Scalar>(cfg: &TrainConfig, cases: &[Case<T>], out_dir: &Path) -> Result<TrainReport> {
    match cfg.stage {
        1 => train_stage1(cfg, cases, out_dir),
        2 => train_stage2(cfg, cases, out_dir),
        s => Err(cfg_err!("stage must be 1 or 2, got {s}")),
    }
}
