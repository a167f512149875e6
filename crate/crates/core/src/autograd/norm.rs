//! Batch normalization over NCHW channels and layer normalization over token features.

use super::{Mode, Op, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Exponential moving averages kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode batches folded into the averages.
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }
}

pub(crate) struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization of an NCHW tensor.
    ///
    /// Train mode normalizes with the biased batch variance over batch and
    /// spatial positions and folds the unbiased variance into `running`.
    /// Eval mode reads `running` and fails if it was never updated.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        momentum: f64,
        mode: Mode,
        running: &mut RunningStats<T>,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("batch norm affine must have {c} entries"));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("running statistics sized for {} channels, input has {c}", running.mean.len()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("batch norm eps must be positive".into()));
        }
        let plane = h * w;
        let count = n * plane;
        let xv = self.value(x).data();
        let eps_t = T::from_f64_lossy(eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xv[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                    }
                    let m = s * inv_count;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &e in &xv[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            ss = ss + (e - m) * (e - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss * inv_count;
                }
                let mom = T::from_f64_lossy(momentum);
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for ch in 0..c {
                    running.mean[ch] = (T::one() - mom) * running.mean[ch] + mom * mean[ch];
                    running.var[ch] = (T::one() - mom) * running.var[ch] + mom * var[ch] * unbias;
                }
                running.updates += 1;
                (mean, var)
            }
            Mode::Eval => {
                if running.updates == 0 {
                    return Err(Error::State("batch norm in eval mode before any running statistics".into()));
                }
                (running.mean.clone(), running.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&e, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / plane) % c;
            *xh = (e - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    /// Normalize each token (last axis) to zero mean and unit variance, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("layer norm affine must have {d} entries"));
        }
        let eps_t = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&e| (e - m) * (e - m)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps_t).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - m) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }
}

/// Gradients of `y = gamma * xhat + beta` where `xhat` was normalized per
/// channel over `n * plane` elements (batch statistics) or with fixed statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn channel_norm_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
    batch_stats: bool,
) -> NormGrads<T> {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dbeta[ch] = dbeta[ch] + g[i];
                dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    let count = T::from_usize(n * plane).unwrap();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in base..base + plane {
                dx[i] = if batch_stats {
                    scale * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                } else {
                    scale * g[i]
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}

pub(crate) fn layer_norm_backward<T: Scalar>(g: &[T], xhat: &[T], inv_std: &[T], gamma: &[T], d: usize) -> NormGrads<T> {
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = vec![T::zero(); g.len()];
    let dd = T::from_usize(d).unwrap();
    for (r, &is) in inv_std.iter().enumerate() {
        let (gr, xr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let gj = gr[j] * gamma[j];
            sum_g = sum_g + gj;
            sum_gx = sum_gx + gj * xr[j];
            dgamma[j] = dgamma[j] + gr[j] * xr[j];
            dbeta[j] = dbeta[j] + gr[j];
        }
        for j in 0..d {
            let gj = gr[j] * gamma[j];
            dx[r * d + j] = is * (gj - sum_g / dd - xr[j] * sum_gx / dd);
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
