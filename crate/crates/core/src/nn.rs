//! Parameterized layers built on the tape.

use rand::Rng;

use crate::autograd::{Mode, RunningStats, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Ok(Self {
            weight: store.add(&format!("{prefix}.weight"), w)?,
            bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            padding,
        })
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel + cout
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Stride-2, 2x2 transposed convolution (upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = he_uniform(&[cin, cout, 2, 2], cin, rng);
        Ok(Self {
            weight: store.add(&format!("{prefix}.weight"), w)?,
            bias: store.add(&format!("{prefix}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        cin * cout * 4 + cout
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, Some(b), 2, 0)
    }
}

/// Batch norm with its running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    updates: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{prefix}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(&format!("{prefix}.running_var"), Tensor::ones(&[channels]))?,
            updates: store.add_buffer(&format!("{prefix}.updates"), Tensor::zeros(&[1]))?,
            eps,
            momentum,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut stats = RunningStats {
            mean: store.value(self.running_mean).data().to_vec(),
            var: store.value(self.running_var).data().to_vec(),
            updates: store.value(self.updates).data()[0].as_f64() as u64,
        };
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.batch_norm2d(x, g, b, self.eps, self.momentum, mode, &mut stats)?;
        if mode == Mode::Train {
            store.get_mut(self.running_mean).value.data_mut().copy_from_slice(&stats.mean);
            store.get_mut(self.running_var).value.data_mut().copy_from_slice(&stats.var);
            store.get_mut(self.updates).value.data_mut()[0] = T::from_f64_lossy(stats.updates as f64);
        }
        Ok(y)
    }
}

/// Two 3x3 convolutions, each followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        eps: f64,
        momentum: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), cin, cout, 3, 1, 1, rng)?,
            bn1: BatchNorm2d::new(store, &format!("{prefix}.bn1"), cout, eps, momentum)?,
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), cout, cout, 3, 1, 1, rng)?,
            bn2: BatchNorm2d::new(store, &format!("{prefix}.bn2"), cout, eps, momentum)?,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        Conv2d::param_count(cin, cout, 3) + Conv2d::param_count(cout, cout, 3) + 2 * BatchNorm2d::param_count(cout)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, store, x)?;
        let y = self.bn1.forward(tape, store, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y)?;
        let y = self.bn2.forward(tape, store, y, mode)?;
        Ok(tape.relu(y))
    }
}
