//! Learnable parameters, the Adam optimizer, learning-rate schedule and the
//! checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CKPT" | version: u16 | { name_len: u32 | name | ndim: u8 | dims: u64 * ndim | payload }*
//! ```
//!
//! The payload width is the element width of the reading/writing store.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Gradients;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with its gradient and Adam moments.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so that they are checkpointed, but never receive gradients.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a learnable tensor. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    /// Register a non-learnable buffer.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Add the gradients recorded for bound parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(dim_err!("gradient shape {:?} for {} ({:?})", g.shape(), p.name, p.value.shape()));
            }
            for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *acc = *acc + *v;
            }
        }
        Ok(())
    }

    /// Serialize every entry (learnable and buffers) in registration order.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&p.value.payload_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    /// Overwrite values from a checkpoint. Every stored parameter must be
    /// present with an identical shape and no unknown names may appear.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = read_checkpoint::<T>(std::fs::File::open(path)?)?;
        self.load_entries(entries)
    }

    pub fn load_entries(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint parameter {name} not in model")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint shape {:?} for {name}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "checkpoint is missing parameter {}",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Parse a checkpoint stream into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<T: Scalar>(mut input: impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing CKPT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut cur = Cursor { bytes: &bytes, pos: 6 };
    let mut out = Vec::new();
    let width = T::DTYPE.size();
    while cur.pos < bytes.len() {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        let count: usize = dims.iter().product();
        let payload = cur.take(count * width)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        let tensor = Tensor::new(&dims, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a single tensor, `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    if grad.len() != value.len() || m.len() != value.len() || v.len() != value.len() {
        return Err(dim_err!("adam buffers disagree in length"));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable entry of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0 }
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        for p in store.params.iter_mut().filter(|p| p.trainable) {
            adam_step(
                p.value.data_mut(),
                p.grad.data(),
                p.first_moment.data_mut(),
                p.second_moment.data_mut(),
                lr,
                &self.config,
                self.step,
            )?;
        }
        Ok(())
    }
}

/// Step decay: the learning rate is divided by `1/factor` at each drop epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = self.drops.iter().filter(|&&d| epoch >= d).count() as i32;
        // Dividing by an exact power of ten keeps 1e-4 -> 1e-5 -> 1e-6 exact.
        let divisor = 1.0 / self.factor;
        if (divisor - divisor.round()).abs() < 1e-12 {
            self.base_lr / divisor.round().powi(k)
        } else {
            self.base_lr * self.factor.powi(k)
        }
    }
}
