//! Central finite-difference checks of tape gradients.
//!
//! A check evaluates a builder closure on the tape, projects a non-scalar
//! output onto a fixed random direction, and compares every (or a sampled
//! subset of) input coordinate's analytic derivative with
//! `(f(x + h) - f(x - h)) / 2h`. Coordinates whose perturbation flips the sign
//! of any ReLU input are excluded, since the derivative is not defined across
//! the kink.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{cross_e2a_stacked, e2a_tokens, E2AVars, QueryKeyProduct, LAYER_NORM_EPS};
use crate::autograd::{Mode, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{dice_loss, DICE_SMOOTHING};
use crate::networks::{E2AUNet, UNetConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per input tensor; larger tensors are subsampled.
    pub max_coords_per_input: usize,
    /// Denominator floor for the relative error, so vanishing gradients do not divide by ~0.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            max_coords_per_input: 64,
            abs_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped_kinks={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped_kinks
        )
    }
}

/// Build function: records the computation on the tape given leaves for each input.
pub type Builder<'a> = dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

struct Evaluation {
    loss: f64,
    kinks: Vec<bool>,
}

fn evaluate(
    build: &mut Builder<'_>,
    inputs: &[Tensor<f64>],
    requires: &[bool],
    projection: &mut Option<Tensor<f64>>,
    seed: u64,
    want_grads: bool,
) -> Result<(Evaluation, Vec<Option<Tensor<f64>>>)> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .zip(requires)
        .map(|(t, &r)| tape.leaf(t.clone(), r && want_grads))
        .collect();
    let out = build(&mut tape, &leaves)?;
    let loss = if tape.value(out).numel() == 1 {
        out
    } else {
        let shape = tape.shape(out).to_vec();
        let proj = projection
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
            })
            .clone();
        let p = tape.constant(proj);
        let prod = tape.mul(out, p)?;
        tape.sum(prod)
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("gradient check loss".into()));
    }
    let kinks = tape.kink_signature().to_vec();
    let grads = if want_grads {
        let g = tape.backward(loss)?;
        leaves.iter().map(|v| g.get(*v).cloned()).collect()
    } else {
        Vec::new()
    };
    Ok((Evaluation { loss: value, kinks }, grads))
}

/// Compare analytic and finite-difference gradients for every input with `requires[i]`.
pub fn check_gradients(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    requires: &[bool],
    build: &mut Builder<'_>,
    opts: &GradCheckOptions,
) -> Result<GradReport> {
    if requires.len() != inputs.len() {
        return Err(Error::Usage("one requires-grad flag per input".into()));
    }
    let mut projection = None;
    let (base, analytic) = evaluate(build, &inputs, requires, &mut projection, opts.seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut probe = inputs.clone();
    for (i, input) in inputs.iter().enumerate() {
        if !requires[i] {
            continue;
        }
        let grad = analytic[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let coords: Vec<usize> = if input.numel() <= opts.max_coords_per_input {
            (0..input.numel()).collect()
        } else {
            sample(&mut rng, input.numel(), opts.max_coords_per_input).into_vec()
        };
        for c in coords {
            let orig = input.data()[c];
            probe[i].data_mut()[c] = orig + opts.step;
            let (plus, _) = evaluate(build, &probe, requires, &mut projection, opts.seed, false)?;
            probe[i].data_mut()[c] = orig - opts.step;
            let (minus, _) = evaluate(build, &probe, requires, &mut projection, opts.seed, false)?;
            probe[i].data_mut()[c] = orig;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
            let a = grad.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        tolerance: opts.tolerance,
        checked,
        skipped_kinks: skipped,
        passed: max_rel < opts.tolerance && checked > 0,
    })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Names accepted by [`run_check`], in the order `run_all` executes them.
pub const REGISTERED: &[&str] = &[
    "conv2d",
    "conv2d_stride2",
    "transposed_conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "concat",
    "linear",
    "softmax",
    "layer_norm",
    "dice_loss",
    "e2a",
    "e2a_elementwise",
    "cross_e2a",
    "e2aunet_reduced",
];

/// Relative-error bound for a registered check.
pub fn tolerance_for(name: &str) -> f64 {
    if name == "e2aunet_reduced" {
        1e-4
    } else {
        1e-5
    }
}

fn e2a_inputs(rng: &mut ChaCha8Rng, b: usize, n: usize, d: usize) -> Vec<Tensor<f64>> {
    vec![
        random_tensor(&[b, n, d], -1.0, 1.0, rng),
        random_tensor(&[d, d], -1.0, 1.0, rng),
        random_tensor(&[d, d], -1.0, 1.0, rng),
        random_tensor(&[d], -1.0, 1.0, rng),
        random_tensor(&[d, d], -1.0, 1.0, rng),
        random_tensor(&[d], -1.0, 1.0, rng),
        random_tensor(&[d], 0.5, 1.5, rng),
        random_tensor(&[d], -1.0, 1.0, rng),
    ]
}

fn e2a_vars(v: &[Var], product: QueryKeyProduct) -> E2AVars {
    E2AVars {
        wq: v[1],
        wk: v[2],
        wa: v[3],
        wout: v[4],
        bout: v[5],
        norm_gamma: v[6],
        norm_beta: v[7],
        product,
    }
}

/// Tiny-batch normalisation makes the loss strongly curved, so the step is smaller here.
const NETWORK_STEP: f64 = 1e-6;

fn reduced_network_check(opts: &GradCheckOptions) -> Result<GradReport> {
    let opts = &GradCheckOptions {
        step: opts.step.min(NETWORK_STEP),
        ..opts.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::<f64>::new();
    let net = E2AUNet::new(&mut store, UNetConfig::with(1, 4, UNetConfig::doubling(2)), opts.seed)?;
    let ids = store.trainable_ids();
    let image = random_tensor(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let target = Tensor::from_fn(&[2, 4, 16, 16], |i| if (i / 256) % 4 == (i * 7 / 5) % 4 { 1.0 } else { 0.0 });
    let mut inputs = vec![image];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let mut requires = vec![false];
    requires.extend(std::iter::repeat_n(true, ids.len()));
    check_gradients(
        "e2aunet_reduced",
        inputs,
        &requires,
        &mut |t, v| {
            for (k, &id) in ids.iter().enumerate() {
                t.bind_param(id, v[k + 1]);
            }
            let y = net.forward(t, &mut store, v[0], Mode::Train)?;
            let g = t.constant(target.clone());
            dice_loss(t, y, g, DICE_SMOOTHING)
        },
        opts,
    )
}

/// Run one registered check with `opts.tolerance` replaced by its registered bound.
pub fn run_check(name: &str, opts: &GradCheckOptions) -> Result<GradReport> {
    let opts = &GradCheckOptions {
        tolerance: tolerance_for(name),
        ..opts.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(shape, lo, hi, &mut rng);
    match name {
        "conv2d" => {
            let inputs = vec![r(&[2, 3, 5, 4], -1.0, 1.0), r(&[4, 3, 3, 3], -1.0, 1.0), r(&[4], -1.0, 1.0)];
            check_gradients(name, inputs, &[true; 3], &mut |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), opts)
        }
        "conv2d_stride2" => {
            let inputs = vec![r(&[2, 2, 6, 6], -1.0, 1.0), r(&[3, 2, 2, 2], -1.0, 1.0), r(&[3], -1.0, 1.0)];
            check_gradients(name, inputs, &[true; 3], &mut |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 0), opts)
        }
        "transposed_conv2d" => {
            let inputs = vec![r(&[2, 4, 3, 3], -1.0, 1.0), r(&[4, 2, 2, 2], -1.0, 1.0), r(&[2], -1.0, 1.0)];
            check_gradients(name, inputs, &[true; 3], &mut |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0), opts)
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let mode = if name == "batch_norm_train" { Mode::Train } else { Mode::Eval };
            let inputs = vec![r(&[3, 2, 3, 3], -1.0, 1.0), r(&[2], 0.5, 1.5), r(&[2], -0.5, 0.5)];
            let mut seeded = RunningStats::new(2);
            seeded.mean = vec![0.1, -0.2];
            seeded.var = vec![0.8, 1.3];
            seeded.updates = 1;
            check_gradients(
                name,
                inputs,
                &[true; 3],
                &mut |t, v| {
                    let mut stats = seeded.clone();
                    t.batch_norm2d(v[0], v[1], v[2], 1e-5, 0.1, mode, &mut stats)
                },
                opts,
            )
        }
        "relu" => check_gradients(name, vec![r(&[4, 5], -1.0, 1.0)], &[true], &mut |t, v| Ok(t.relu(v[0])), opts),
        "sigmoid" => check_gradients(name, vec![r(&[4, 5], -4.0, 4.0)], &[true], &mut |t, v| Ok(t.sigmoid(v[0])), opts),
        "concat" => {
            let inputs = vec![r(&[2, 3, 2, 2], -1.0, 1.0), r(&[2, 1, 2, 2], -1.0, 1.0)];
            check_gradients(name, inputs, &[true; 2], &mut |t, v| t.concat_channels(v[0], v[1]), opts)
        }
        "linear" => {
            let inputs = vec![r(&[2, 5, 3], -1.0, 1.0), r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)];
            check_gradients(name, inputs, &[true; 3], &mut |t, v| t.linear(v[0], v[1], Some(v[2])), opts)
        }
        "softmax" => check_gradients(name, vec![r(&[3, 6], -3.0, 3.0)], &[true], &mut |t, v| Ok(t.softmax(v[0])), opts),
        "layer_norm" => {
            let inputs = vec![r(&[2, 4, 5], -1.0, 1.0), r(&[5], 0.5, 1.5), r(&[5], -0.5, 0.5)];
            check_gradients(name, inputs, &[true; 3], &mut |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS), opts)
        }
        "dice_loss" => {
            let inputs = vec![r(&[2, 3, 4, 4], 0.05, 0.95), r(&[2, 3, 4, 4], 0.0, 1.0).map(f64::round)];
            check_gradients(name, inputs, &[true, false], &mut |t, v| dice_loss(t, v[0], v[1], DICE_SMOOTHING), opts)
        }
        "e2a" | "e2a_elementwise" => {
            let product = if name == "e2a" { QueryKeyProduct::GlobalQuery } else { QueryKeyProduct::Elementwise };
            let inputs = e2a_inputs(&mut rng, 2, 6, 4);
            check_gradients(name, inputs, &[true; 8], &mut |t, v| e2a_tokens(t, v[0], &e2a_vars(v, product)), opts)
        }
        "cross_e2a" => {
            let inputs = e2a_inputs(&mut rng, 3, 5, 4);
            check_gradients(
                name,
                inputs,
                &[true; 8],
                &mut |t, v| cross_e2a_stacked(t, v[0], &e2a_vars(v, QueryKeyProduct::GlobalQuery)),
                opts,
            )
        }
        "e2aunet_reduced" => reduced_network_check(opts),
        other => Err(Error::Usage(format!("unknown gradient check {other}; known: {}", REGISTERED.join(", ")))),
    }
}

pub fn run_all(opts: &GradCheckOptions) -> Result<Vec<GradReport>> {
    REGISTERED.iter().map(|name| run_check(name, opts)).collect()
}
