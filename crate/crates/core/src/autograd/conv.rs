//! im2col-based convolution kernels shared by the forward and backward passes.

use crate::tensor::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution reading a `channels x height x width` map.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kernel || span_w < kernel {
            return None;
        }
        if (span_h - kernel) % stride != 0 || (span_w - kernel) % stride != 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold `x` (C x H x W) into `cols` ((C*k*k) x (Ho*Wo)).
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let plane = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation over a batch. `w` is `cout x (cin*k*k)`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = cout * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(false, false, cout, g.col_cols(), g.col_rows(), w, src, yn, false);
        if let Some(b) = bias {
            for (co, row) in yn.chunks_mut(g.col_cols()).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }
    out
}

/// Backward of [`conv_forward`]. Each gradient buffer is optional.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let out_len = cout * plane;
    let mut cols = vec![T::zero(); g.col_rows() * plane];
    for n in 0..batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyn_.chunks(plane).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(false, true, cout, g.col_rows(), plane, dyn_, src, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(true, false, g.col_rows(), plane, cout, w, dyn_, dxn, true);
            } else {
                gemm(true, false, g.col_rows(), plane, cout, w, dyn_, &mut cols, false);
                col2im(&cols, g, dxn);
            }
        }
    }
}

/// Transposed convolution: the adjoint of a forward convolution whose input
/// geometry is `g` (output map `g.channels x g.height x g.width`), reading an
/// `cin x g.out_h x g.out_w` input. `w` is `cin x (cout*k*k)` with `cout = g.channels`.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = cin * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        gemm(true, false, g.col_rows(), g.col_cols(), cin, w, xn, &mut cols, false);
        col2im(&cols, g, yn);
        if let Some(b) = bias {
            for (co, row) in yn.chunks_mut(g.height * g.width).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_len = cin * g.col_cols();
    let plane = g.height * g.width;
    let out_len = g.channels * plane;
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let dyn_ = &dy[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyn_.chunks(plane).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(dyn_, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            gemm(false, false, cin, g.col_cols(), g.col_rows(), w, &cols, dxn, true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            gemm(false, true, cin, g.col_rows(), g.col_cols(), xn, &cols, dw, true);
        }
    }
}
