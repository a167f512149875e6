//! Efficient additive attention (E-2A), its three-stream cross variant, and a
//! multi-head self-attention reference used only for runtime comparisons.
//!
//! E-2A never forms a token-by-token matrix. With `Q = f Wq`, `K = f Wk`:
//!
//! ```text
//! alpha = softmax_tokens((Q w_a) / sqrt(d))
//! q     = sum_i alpha_i Q_i                      (one global query, length d)
//! f*    = layer_norm(Q) + linear(q * K_i)        (per token i)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{cfg_err, dim_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How the query/key interaction inside E-2A is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKeyProduct {
    /// Global query broadcast over the key matrix (`q * K_i`).
    #[default]
    GlobalQuery,
    /// Token-wise product of the full query and key matrices (`Q_i * K_i`).
    Elementwise,
}

/// A feature map flattened into tokens: `[B, H*W, C]` plus the spatial extents.
#[derive(Clone, Copy, Debug)]
pub struct TokenView {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenView {
    pub fn from_map<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Self> {
        let (_, _, height, width) = tape.value(x).nchw()?;
        Ok(Self {
            tokens: tape.to_tokens(x)?,
            height,
            width,
        })
    }

    pub fn to_map<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.from_tokens(self.tokens, self.height, self.width)
    }

    /// Wrap an existing `[B, n, d]` token tensor laid out as a `1 x n` map.
    pub fn from_tokens<T: Scalar>(tape: &Tape<T>, tokens: Var) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 3 {
            return Err(dim_err!("token tensor must be [B, n, d], got {s:?}"));
        }
        Ok(Self {
            tokens,
            height: 1,
            width: s[1],
        })
    }
}

/// Tape variables for one E-2A parameter set.
#[derive(Clone, Copy, Debug)]
pub struct E2AVars {
    pub wq: Var,
    pub wk: Var,
    /// Attention vector, shape `[d]`.
    pub wa: Var,
    pub wout: Var,
    pub bout: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub product: QueryKeyProduct,
}

struct Projected {
    q: Var,
    k: Var,
}

fn project<T: Scalar>(tape: &mut Tape<T>, tokens: Var, p: &E2AVars) -> Result<Projected> {
    let s = tape.shape(tokens).to_vec();
    let d = tape.shape(p.wq)[0];
    if s.len() != 3 || s[2] != d {
        return Err(dim_err!("E-2A with dimension {d} applied to tokens {s:?}"));
    }
    if s[1] == 0 {
        return Err(dim_err!("E-2A needs at least one token"));
    }
    Ok(Projected {
        q: tape.matmul(tokens, p.wq)?,
        k: tape.matmul(tokens, p.wk)?,
    })
}

/// Attention weights over tokens, `[B, n]`.
pub fn token_weights<T: Scalar>(tape: &mut Tape<T>, q: Var, wa: Var) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let wa_col = tape.reshape(wa, &[d, 1])?;
    let logits = tape.matmul(q, wa_col)?;
    let logits = tape.reshape(logits, &[b, n])?;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let scaled = tape.scale(logits, scale);
    Ok(tape.softmax(scaled))
}

fn combine<T: Scalar>(tape: &mut Tape<T>, q: Var, context: Var, p: &E2AVars) -> Result<Var> {
    let normed = tape.layer_norm(q, p.norm_gamma, p.norm_beta, LAYER_NORM_EPS)?;
    let mixed = tape.linear(context, p.wout, Some(p.bout))?;
    tape.add(normed, mixed)
}

fn context<T: Scalar>(tape: &mut Tape<T>, proj: &Projected, keys: Var, p: &E2AVars) -> Result<Var> {
    match p.product {
        QueryKeyProduct::GlobalQuery => {
            let alpha = token_weights(tape, proj.q, p.wa)?;
            let global = tape.weighted_token_sum(alpha, proj.q)?;
            tape.row_broadcast_mul(keys, global)
        }
        QueryKeyProduct::Elementwise => tape.mul(proj.q, keys),
    }
}

/// Self E-2A on `[B, n, d]` tokens.
pub fn e2a_tokens<T: Scalar>(tape: &mut Tape<T>, tokens: Var, p: &E2AVars) -> Result<Var> {
    let proj = project(tape, tokens, p)?;
    let ctx = context(tape, &proj, proj.k, p)?;
    combine(tape, proj.q, ctx, p)
}

/// Cross E-2A on three streams stacked along the batch axis (`[3B, n, d]`,
/// stream order LV, RV, MYO). Each stream's global query meets the mean key
/// matrix of the two other streams. One parameter set serves all streams.
pub fn cross_e2a_stacked<T: Scalar>(tape: &mut Tape<T>, tokens: Var, p: &E2AVars) -> Result<Var> {
    let b3 = tape.shape(tokens)[0];
    if b3 % 3 != 0 {
        return Err(dim_err!("cross E-2A expects three stacked streams, batch is {b3}"));
    }
    let proj = project(tape, tokens, p)?;
    let partner_keys = tape.partner_mean(proj.k, 3)?;
    let ctx = context(tape, &proj, partner_keys, p)?;
    combine(tape, proj.q, ctx, p)
}

pub fn e2a_forward<T: Scalar>(tape: &mut Tape<T>, f: &TokenView, p: &E2AVars) -> Result<TokenView> {
    Ok(TokenView {
        tokens: e2a_tokens(tape, f.tokens, p)?,
        ..*f
    })
}

/// Three-stream cross E-2A on separate views; returns outputs in input order.
pub fn cross_e2a_forward<T: Scalar>(
    tape: &mut Tape<T>,
    lv: &TokenView,
    rv: &TokenView,
    myo: &TokenView,
    p: &E2AVars,
) -> Result<[TokenView; 3]> {
    let shape = tape.shape(lv.tokens).to_vec();
    if tape.shape(rv.tokens) != shape || tape.shape(myo.tokens) != shape {
        return Err(dim_err!(
            "cross E-2A streams differ: {shape:?}, {:?}, {:?}",
            tape.shape(rv.tokens),
            tape.shape(myo.tokens)
        ));
    }
    let b = shape[0];
    let first = tape.concat(lv.tokens, rv.tokens, 0)?;
    let stacked = tape.concat(first, myo.tokens, 0)?;
    let out = cross_e2a_stacked(tape, stacked, p)?;
    let mut views = [*lv, *rv, *myo];
    for (i, view) in views.iter_mut().enumerate() {
        view.tokens = tape.slice(out, 0, i * b, b)?;
    }
    Ok(views)
}

/// Learnable E-2A block registered in a parameter store.
#[derive(Clone, Debug)]
pub struct E2ABlock {
    pub dim: usize,
    pub product: QueryKeyProduct,
    wq: ParamId,
    wk: ParamId,
    wa: ParamId,
    wout: ParamId,
    bout: ParamId,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

impl E2ABlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        product: QueryKeyProduct,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut uniform = |shape: &[usize]| -> Tensor<T> {
            Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
        };
        let wq = uniform(&[dim, dim]);
        let wk = uniform(&[dim, dim]);
        let wa = uniform(&[dim]);
        let wout = uniform(&[dim, dim]);
        Ok(Self {
            dim,
            product,
            wq: store.add(&format!("{prefix}.wq"), wq)?,
            wk: store.add(&format!("{prefix}.wk"), wk)?,
            wa: store.add(&format!("{prefix}.wa"), wa)?,
            wout: store.add(&format!("{prefix}.wout"), wout)?,
            bout: store.add(&format!("{prefix}.bout"), Tensor::zeros(&[dim]))?,
            norm_gamma: store.add(&format!("{prefix}.norm.gamma"), Tensor::ones(&[dim]))?,
            norm_beta: store.add(&format!("{prefix}.norm.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    /// Learnable scalars in a block of dimension `d`: three `d x d` maps,
    /// the attention vector, the output bias and the norm affine.
    pub fn param_count(dim: usize) -> usize {
        3 * dim * dim + 4 * dim
    }

    pub fn param_ids(&self) -> [ParamId; 7] {
        [self.wq, self.wk, self.wa, self.wout, self.bout, self.norm_gamma, self.norm_beta]
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> E2AVars {
        E2AVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wa: tape.param(store, self.wa),
            wout: tape.param(store, self.wout),
            bout: tape.param(store, self.bout),
            norm_gamma: tape.param(store, self.norm_gamma),
            norm_beta: tape.param(store, self.norm_beta),
            product: self.product,
        }
    }

    /// Apply to an NCHW map. With `cross`, the batch holds three stacked streams.
    pub fn forward_map<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, cross: bool) -> Result<Var> {
        let p = self.vars(tape, store);
        let view = TokenView::from_map(tape, x)?;
        let out = if cross {
            cross_e2a_stacked(tape, view.tokens, &p)?
        } else {
            e2a_tokens(tape, view.tokens, &p)?
        };
        TokenView { tokens: out, ..view }.to_map(tape)
    }
}

/// Projections for the multi-head self-attention reference.
#[derive(Clone, Debug)]
pub struct MhsaParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> MhsaParams<T> {
    pub fn identity(d: usize) -> Self {
        let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { T::one() } else { T::zero() });
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }

    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut m = || Tensor::from_fn(&[d, d], |_| T::from_f64_lossy(rng.random_range(-bound..bound)));
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
        }
    }
}

const MHSA_ROW_BLOCK: usize = 256;

fn project_plain<T: Scalar>(x: &[T], w: &Tensor<T>, n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * d];
    gemm(false, false, n, d, d, x, w.data(), &mut out, false);
    out
}

fn check_mhsa<T: Scalar>(tokens: &Tensor<T>, heads: usize, p: &MhsaParams<T>) -> Result<(usize, usize)> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(dim_err!("MHSA expects [n, d] tokens, got {s:?}"));
    }
    let (n, d) = (s[0], s[1]);
    if heads == 0 || d % heads != 0 {
        return Err(cfg_err!("model dimension {d} is not divisible by {heads} heads"));
    }
    for w in [&p.wq, &p.wk, &p.wv, &p.wo] {
        if w.shape() != [d, d] {
            return Err(dim_err!("MHSA projection {:?} for dimension {d}", w.shape()));
        }
    }
    Ok((n, d))
}

/// Row-normalized attention for one block of query rows of one head.
#[allow(clippy::too_many_arguments)]
fn head_scores<T: Scalar>(q: &[T], k: &[T], n: usize, d: usize, head: usize, dh: usize, row0: usize, rows: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); rows * n];
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    T::gemm_raw(
        rows,
        dh,
        n,
        scale,
        &q[row0 * d + head * dh..],
        d as isize,
        1,
        &k[head * dh..],
        1,
        d as isize,
        T::zero(),
        &mut scores,
        n as isize,
        1,
    );
    for row in scores.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            total = total + *e;
        }
        row.iter_mut().for_each(|e| *e = *e / total);
    }
    scores
}

/// Scaled dot-product multi-head self-attention on `[n, d]` tokens.
///
/// Query rows are processed in blocks so memory stays `O(block * n)`, but the
/// work is quadratic in `n`.
pub fn mhsa_forward<T: Scalar>(tokens: &Tensor<T>, heads: usize, p: &MhsaParams<T>) -> Result<Tensor<T>> {
    let (n, d) = check_mhsa(tokens, heads, p)?;
    let dh = d / heads;
    let x = tokens.data();
    let q = project_plain(x, &p.wq, n, d);
    let k = project_plain(x, &p.wk, n, d);
    let v = project_plain(x, &p.wv, n, d);
    let mut attended = vec![T::zero(); n * d];
    for head in 0..heads {
        for row0 in (0..n).step_by(MHSA_ROW_BLOCK) {
            let rows = MHSA_ROW_BLOCK.min(n - row0);
            let scores = head_scores(&q, &k, n, d, head, dh, row0, rows);
            T::gemm_raw(
                rows,
                n,
                dh,
                T::one(),
                &scores,
                n as isize,
                1,
                &v[head * dh..],
                d as isize,
                1,
                T::zero(),
                &mut attended[row0 * d + head * dh..],
                d as isize,
                1,
            );
        }
    }
    Tensor::new(&[n, d], project_plain(&attended, &p.wo, n, d))
}

/// Full `[n, n]` attention matrix of each head (for inspection on small inputs).
pub fn mhsa_attention_weights<T: Scalar>(tokens: &Tensor<T>, heads: usize, p: &MhsaParams<T>) -> Result<Vec<Tensor<T>>> {
    let (n, d) = check_mhsa(tokens, heads, p)?;
    let dh = d / heads;
    let q = project_plain(tokens.data(), &p.wq, n, d);
    let k = project_plain(tokens.data(), &p.wk, n, d);
    (0..heads)
        .map(|h| Tensor::new(&[n, n], head_scores(&q, &k, n, d, h, dh, 0, n)))
        .collect()
}
