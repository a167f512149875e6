//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every operation is evaluated eagerly and appended to the [`Tape`]; the
//! tape's order is therefore already topological. [`Tape::backward`] walks it
//! in reverse and accumulates gradients for every node that requires one.

mod conv;
mod norm;

use std::collections::HashMap;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

pub(crate) use conv::ConvGeom;
pub use norm::RunningStats;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Train mode uses batch statistics in batch norm; eval mode uses running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    Reshape(Var),
    Concat { a: Var, b: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Softmax(Var),
    WeightedTokenSum { alpha: Var, q: Var },
    RowBroadcastMul { x: Var, q: Var },
    PartnerMean { x: Var, groups: usize },
    ToTokens(Var),
    FromTokens(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    kinks: Vec<bool>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }

    /// Gradients of parameters bound to the tape, in parameter order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            kinks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// The leaf holding a parameter's current value, created on first use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Route every later `param(id)` lookup to an existing variable.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Element count of the `index`-th recorded value.
    pub fn values_numel(&self, index: usize) -> usize {
        self.nodes[index].value.numel()
    }

    /// Sign pattern of every ReLU input seen so far (`true` = strictly positive).
    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_values(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let input = &self.nodes[x.0].value;
        self.kinks.extend(input.data().iter().map(|&e| e > T::zero()));
        let v = self.nodes[x.0].value.map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| {
            if e >= T::zero() {
                T::one() / (T::one() + (-e).exp())
            } else {
                let z = e.exp();
                z / (T::one() + z)
            }
        });
        self.push(v, Op::Sigmoid(x), &[x])
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.numel()).unwrap());
        self.push(v, Op::Mean(x), &[x])
    }

    /// Sum over the two trailing (spatial) axes of an NCHW tensor, giving `[N, C]`.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum())
            .collect();
        let v = Tensor::new(&[n, c], data)?;
        Ok(self.push(v, Op::SumSpatial(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(dim_err!("concat on axis {axis}: incompatible shapes {sa:?} and {sb:?}"));
        }
        let outer: usize = sa[..axis].iter().product();
        let (ca, cb) = (sa[axis..].iter().product::<usize>(), sb[axis..].iter().product::<usize>());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(outer * (ca + cb));
        for o in 0..outer {
            data.extend_from_slice(&va[o * ca..(o + 1) * ca]);
            data.extend_from_slice(&vb[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat { a, b, axis }, &[a, b]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 4 || self.shape(b).len() != 4 {
            return Err(dim_err!("concat_channels expects NCHW inputs"));
        }
        self.concat(a, b, 1)
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(dim_err!("slice [{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    // ---- convolutions ----

    /// Cross-correlation. `w` is `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).nchw()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(dim_err!("conv2d weight {ws:?} incompatible with input channels {cin}"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if !(1..=3).contains(&k) || !(1..=2).contains(&stride) {
            return Err(cfg_err!("conv2d supports kernels 1..=3 and strides 1..=2, got k={k} s={stride}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("conv2d bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, k, stride, padding).ok_or_else(|| {
            cfg_err!("conv2d output extent not integral for {h}x{wd}, k={k}, stride={stride}, padding={padding}")
        })?;
        let out = conv::conv_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
        );
        let v = Tensor::new(&[n, cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution, the adjoint of `conv2d` with the same kernel,
    /// stride and padding. `w` is `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).nchw()?;
        if cin % 2 != 0 {
            return Err(cfg_err!("transposed convolution needs an even channel count, got {cin}"));
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[2] != ws[3] {
            return Err(dim_err!("transposed conv weight {ws:?} incompatible with input channels {cin}"));
        }
        let (cout, k) = (ws[1], ws[2]);
        if !(1..=3).contains(&k) || !(1..=2).contains(&stride) {
            return Err(cfg_err!("unsupported transposed conv config k={k} s={stride} p={padding}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("transposed conv bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let out_h = ((h - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let out_w = ((wd - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v > 0);
        let (out_h, out_w) = out_h
            .zip(out_w)
            .ok_or_else(|| cfg_err!("transposed conv output extent is empty"))?;
        let geom = ConvGeom::new(cout, out_h, out_w, k, stride, padding)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| cfg_err!("transposed conv geometry is not invertible"))?;
        let out = conv::conv_transpose_forward(
            self.value(x).data(),
            n,
            cin,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(&[n, cout, out_h, out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    // ---- token ops ----

    /// `x[.., d] . w[d, e]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != d {
            return Err(dim_err!("matmul: input {xs:?} against weight {ws:?}"));
        }
        let rows = self.value(x).numel() / d;
        let e = ws[1];
        let mut out = vec![T::zero(); rows * e];
        gemm(false, false, rows, e, d, self.value(x).data(), self.value(w).data(), &mut out, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = e;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::MatMul { x, w }, &[x, w]))
    }

    /// Add a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let e = *self.shape(x).last().unwrap();
        if self.shape(b) != [e] {
            return Err(dim_err!("bias {:?} for trailing extent {e}", self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(e) {
            row.iter_mut().zip(&bias).for_each(|(a, b)| *a = *a + *b);
        }
        Ok(self.push(v, Op::AddBias { x, b }, &[x, b]))
    }

    /// Affine map per token: `x . w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Softmax over the last axis of each row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total = total + *e;
            }
            row.iter_mut().for_each(|e| *e = *e / total);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    /// `alpha[B, n]`, `q[B, n, d]` -> `sum_i alpha[b, i] * q[b, i, :]`, shape `[B, d]`.
    pub fn weighted_token_sum(&mut self, alpha: Var, q: Var) -> Result<Var> {
        let (sa, sq) = (self.shape(alpha).to_vec(), self.shape(q).to_vec());
        if sa.len() != 2 || sq.len() != 3 || sa[0] != sq[0] || sa[1] != sq[1] {
            return Err(dim_err!("weighted_token_sum: weights {sa:?} and tokens {sq:?}"));
        }
        let (b, n, d) = (sq[0], sq[1], sq[2]);
        let mut out = vec![T::zero(); b * d];
        let (av, qv) = (self.value(alpha).data(), self.value(q).data());
        for i in 0..b {
            gemm(
                false,
                false,
                1,
                d,
                n,
                &av[i * n..(i + 1) * n],
                &qv[i * n * d..(i + 1) * n * d],
                &mut out[i * d..(i + 1) * d],
                false,
            );
        }
        let v = Tensor::new(&[b, d], out)?;
        Ok(self.push(v, Op::WeightedTokenSum { alpha, q }, &[alpha, q]))
    }

    /// `x[B, n, d] * q[B, d]` with `q` broadcast over tokens.
    pub fn row_broadcast_mul(&mut self, x: Var, q: Var) -> Result<Var> {
        let (sx, sq) = (self.shape(x).to_vec(), self.shape(q).to_vec());
        if sx.len() != 3 || sq.len() != 2 || sx[0] != sq[0] || sx[2] != sq[1] {
            return Err(dim_err!("row_broadcast_mul: tokens {sx:?} and row {sq:?}"));
        }
        let (n, d) = (sx[1], sx[2]);
        let qv = self.value(q).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, row) in v.data_mut().chunks_mut(d).enumerate() {
            let qrow = &qv[(i / n) * d..(i / n + 1) * d];
            row.iter_mut().zip(qrow).for_each(|(a, b)| *a = *a * *b);
        }
        Ok(self.push(v, Op::RowBroadcastMul { x, q }, &[x, q]))
    }

    /// Split the leading axis into `groups` equal blocks; block `g` of the
    /// output is the mean of every other block.
    pub fn partner_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if groups < 2 || s[0] % groups != 0 {
            return Err(dim_err!("partner_mean: leading extent {} not divisible into {groups} groups", s[0]));
        }
        let block = self.value(x).numel() / groups;
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(groups - 1).unwrap();
        let mut out = vec![T::zero(); src.len()];
        for g in 0..groups {
            let dst = &mut out[g * block..(g + 1) * block];
            for h in (0..groups).filter(|&h| h != g) {
                let other = &src[h * block..(h + 1) * block];
                dst.iter_mut().zip(other).for_each(|(a, b)| *a = *a + *b);
            }
            dst.iter_mut().for_each(|a| *a = *a * inv);
        }
        let v = Tensor::new(&s, out)?;
        Ok(self.push(v, Op::PartnerMean { x, groups }, &[x]))
    }

    /// `[N, C, H, W]` -> `[N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let v = Tensor::new(&[n, h * w, c], transpose_blocks(self.value(x).data(), n, c, h * w))?;
        Ok(self.push(v, Op::ToTokens(x), &[x]))
    }

    /// `[N, H*W, C]` -> `[N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(dim_err!("from_tokens: {s:?} cannot unflatten to {h}x{w}"));
        }
        let (n, c) = (s[0], s[2]);
        let v = Tensor::new(&[n, c, h, w], transpose_blocks(self.value(x).data(), n, h * w, c))?;
        Ok(self.push(v, Op::FromTokens(x), &[x]))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward on a loss detached from every differentiable input");
            return Ok(Gradients {
                grads: (0..self.nodes.len()).map(|_| None).collect(),
                params,
            });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.filter(|_| node.requires_grad).map(|g| Tensor::new(node.value.shape(), g).unwrap()))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.slot(grads, v) {
            for (i, e) in buf.iter_mut().enumerate() {
                *e = *e + f(i);
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[idx].value.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| g[i] * vb[i]);
                self.accumulate(grads, *b, |i| g[i] * va[i]);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                self.accumulate(grads, *a, |i| g[i] / vb[i]);
                self.accumulate(grads, *b, |i| -g[i] * out[i] / vb[i]);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |i| g[i] * *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |i| g[i]),
            Op::Relu(x) => self.accumulate(grads, *x, |i| if out[i] > T::zero() { g[i] } else { T::zero() }),
            Op::Sigmoid(x) => {
                let input = self.value(*x).data();
                self.accumulate(grads, *x, |i| {
                    let z = (-input[i].abs()).exp();
                    let d = T::one() + z;
                    g[i] * z / (d * d)
                })
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let inv = g[0] / T::from_usize(self.value(*x).numel()).unwrap();
                self.accumulate(grads, *x, |_| inv)
            }
            Op::SumSpatial(x) => {
                let (_, _, h, w) = self.value(*x).nchw().unwrap();
                self.accumulate(grads, *x, |i| g[i / (h * w)])
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let ca: usize = sa[*axis..].iter().product();
                let cb: usize = sb[*axis..].iter().product();
                self.accumulate(grads, *a, |i| g[(i / ca) * (ca + cb) + i % ca]);
                self.accumulate(grads, *b, |i| g[(i / cb) * (ca + cb) + ca + i % cb]);
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let inner: usize = s[axis + 1..].iter().product();
                let len = self.nodes[idx].value.shape()[*axis];
                if let Some(buf) = self.slot(grads, *x) {
                    for (o, chunk) in g.chunks(len * inner).enumerate() {
                        let base = (o * s[*axis] + start) * inner;
                        buf[base..base + len * inner]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(a, b)| *a = *a + *b);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut dw = self.slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b)).map(std::mem::take);
                conv::conv_backward(
                    xv,
                    n,
                    geom,
                    wv,
                    cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut dw = self.slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b)).map(std::mem::take);
                conv::conv_transpose_backward(
                    xv,
                    n,
                    cin,
                    geom,
                    wv,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let gv = self.value(*gamma).data();
                let r = norm::channel_norm_backward(g, xhat, inv_std, gv, n, c, h * w, *batch_stats);
                self.accumulate(grads, *x, |i| r.dx[i]);
                self.accumulate(grads, *gamma, |i| r.dgamma[i]);
                self.accumulate(grads, *beta, |i| r.dbeta[i]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let gv = self.value(*gamma).data();
                let r = norm::layer_norm_backward(g, xhat, inv_std, gv, d);
                self.accumulate(grads, *x, |i| r.dx[i]);
                self.accumulate(grads, *gamma, |i| r.dgamma[i]);
                self.accumulate(grads, *beta, |i| r.dbeta[i]);
            }
            Op::MatMul { x, w } => {
                let ws = self.shape(*w);
                let (d, e) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / d;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(false, true, rows, d, e, g, wv, dx, true);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(true, false, d, e, rows, xv, g, dw, true);
                }
            }
            Op::AddBias { x, b } => {
                let e = *self.shape(*x).last().unwrap();
                self.accumulate(grads, *x, |i| g[i]);
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(e) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            dxr[j] = dxr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::WeightedTokenSum { alpha, q } => {
                let sq = self.shape(*q);
                let (b, n, d) = (sq[0], sq[1], sq[2]);
                let (av, qv) = (self.value(*alpha).data(), self.value(*q).data());
                if let Some(da) = self.slot(grads, *alpha) {
                    for i in 0..b {
                        gemm(
                            false,
                            true,
                            1,
                            n,
                            d,
                            &g[i * d..(i + 1) * d],
                            &qv[i * n * d..(i + 1) * n * d],
                            &mut da[i * n..(i + 1) * n],
                            true,
                        );
                    }
                }
                if let Some(dq) = self.slot(grads, *q) {
                    for i in 0..b {
                        gemm(
                            true,
                            false,
                            n,
                            d,
                            1,
                            &av[i * n..(i + 1) * n],
                            &g[i * d..(i + 1) * d],
                            &mut dq[i * n * d..(i + 1) * n * d],
                            true,
                        );
                    }
                }
            }
            Op::RowBroadcastMul { x, q } => {
                let sx = self.shape(*x);
                let (n, d) = (sx[1], sx[2]);
                let (xv, qv) = (self.value(*x).data(), self.value(*q).data());
                self.accumulate(grads, *x, |i| g[i] * qv[(i / (n * d)) * d + i % d]);
                if let Some(dq) = self.slot(grads, *q) {
                    for (i, (gv, xe)) in g.iter().zip(xv).enumerate() {
                        let j = (i / (n * d)) * d + i % d;
                        dq[j] = dq[j] + *gv * *xe;
                    }
                }
            }
            Op::PartnerMean { x, groups } => {
                let block = g.len() / groups;
                let inv = T::one() / T::from_usize(groups - 1).unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for h in 0..*groups {
                        let dst = &mut dx[h * block..(h + 1) * block];
                        for gi in (0..*groups).filter(|&gi| gi != h) {
                            let src = &g[gi * block..(gi + 1) * block];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a = *a + *b * inv);
                        }
                    }
                }
            }
            Op::ToTokens(x) => {
                let (n, c, h, w) = self.value(*x).nchw().unwrap();
                let back = transpose_blocks(g, n, h * w, c);
                self.accumulate(grads, *x, |i| back[i]);
            }
            Op::FromTokens(x) => {
                let s = self.shape(*x);
                let back = transpose_blocks(g, s[0], s[2], s[1]);
                self.accumulate(grads, *x, |i| back[i]);
            }
        }
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, buf: Option<Vec<T>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

/// Transpose each of `n` row-major `rows x cols` blocks.
fn transpose_blocks<T: Scalar>(src: &[T], n: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let block = rows * cols;
    for b in 0..n {
        let (s, d) = (&src[b * block..(b + 1) * block], &mut out[b * block..(b + 1) * block]);
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
