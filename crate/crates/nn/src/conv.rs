//! im2col lowering for strided 2-D convolution and its transpose.
//!
//! Column matrices are laid out `[channels * k * k, out_h * out_w]` per sample,
//! with row index `(c * k + ki) * k + kj`.

use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;

/// Geometry of a square-kernel convolution mapping `in_h x in_w` to
/// `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Forward convolution geometry. Returns `None` when the kernel does not
    /// fit the padded input.
    pub fn conv(in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps `in_h x in_w` up to the
    /// transposed-convolution output. `in_*`/`out_*` keep the forward-conv
    /// meaning: `in` is the large (transposed output) side.
    pub fn transposed(small_h: usize, small_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let big_h = ((small_h.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)?;
        let big_w = ((small_w.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)?;
        let g = Self::conv(big_h, big_w, kernel, stride, pad)?;
        (g.out_h == small_h && g.out_w == small_w).then_some(g)
    }

    pub fn col_rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_area(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// Gather one sample `[channels, in_h, in_w]` into `cols`.
pub fn im2col<T: Scalar>(src: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    debug_assert_eq!(src.len(), channels * g.in_area());
    debug_assert_eq!(cols.len(), g.col_rows(channels) * ncols);
    for c in 0..channels {
        let plane = &src[c * g.in_area()..(c + 1) * g.in_area()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols` back into one sample `[channels, in_h, in_w]`.
/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, dst: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    debug_assert_eq!(dst.len(), channels * g.in_area());
    for c in 0..channels {
        let plane = &mut dst[c * g.in_area()..(c + 1) * g.in_area()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let srcrow = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let line = &srcrow[oh * g.out_w..(oh + 1) * g.out_w];
                    let dst_row = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch `x: [n, c_in, in_h, in_w]` with weights
/// `w: [c_out, c_in, k, k]`. Writes `out: [n, c_out, out_h, out_w]` and
/// returns the per-sample column buffers for reuse in the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    b: &[T],
    c_out: usize,
    g: &ConvGeom,
    out: &mut [T],
) -> Vec<T> {
    let rows = g.col_rows(c_in);
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); n * rows * ncols];
    for s in 0..n {
        let xs = &x[s * c_in * g.in_area()..(s + 1) * c_in * g.in_area()];
        let cs = &mut cols[s * rows * ncols..(s + 1) * rows * ncols];
        im2col(xs, c_in, g, cs);
        let os = &mut out[s * c_out * ncols..(s + 1) * c_out * ncols];
        for (o, chunk) in os.chunks_mut(ncols).enumerate() {
            chunk.fill(b[o]);
        }
        gemm(
            T::one(),
            MatRef::rm(w, c_out, rows),
            MatRef::rm(cs, rows, ncols),
            T::one(),
            MatMut::rm(os, c_out, ncols),
        );
    }
    cols
}

/// Backward of [`conv2d_forward`]. Any of the gradient outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dout: &[T],
    cols: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let rows = g.col_rows(c_in);
    let ncols = g.col_cols();
    if let Some(dw) = dw {
        for s in 0..n {
            gemm(
                T::one(),
                MatRef::rm(&dout[s * c_out * ncols..(s + 1) * c_out * ncols], c_out, ncols),
                MatRef::rm_t(&cols[s * rows * ncols..(s + 1) * rows * ncols], ncols, rows),
                T::one(),
                MatMut::rm(dw, c_out, rows),
            );
        }
    }
    if let Some(db) = db {
        for s in 0..n {
            for (o, chunk) in dout[s * c_out * ncols..(s + 1) * c_out * ncols]
                .chunks(ncols)
                .enumerate()
            {
                db[o] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            gemm(
                T::one(),
                MatRef::rm_t(w, rows, c_out),
                MatRef::rm(&dout[s * c_out * ncols..(s + 1) * c_out * ncols], c_out, ncols),
                T::zero(),
                MatMut::rm(&mut dcols, rows, ncols),
            );
            col2im(
                &dcols,
                c_in,
                g,
                &mut dx[s * c_in * g.in_area()..(s + 1) * c_in * g.in_area()],
            );
        }
    }
}

/// Transposed convolution of `x: [n, c_in, small_h, small_w]` with weights
/// `w: [c_in, c_out, k, k]` into `out: [n, c_out, big_h, big_w]`, where `g`
/// is the geometry from [`ConvGeom::transposed`].
#[allow(clippy::too_many_arguments)]
pub fn conv_t2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    b: &[T],
    c_out: usize,
    g: &ConvGeom,
    out: &mut [T],
) {
    let rows = g.col_rows(c_out);
    let small = g.col_cols();
    let big = g.in_area();
    let mut cols = vec![T::zero(); rows * small];
    for s in 0..n {
        gemm(
            T::one(),
            MatRef::rm_t(w, rows, c_in),
            MatRef::rm(&x[s * c_in * small..(s + 1) * c_in * small], c_in, small),
            T::zero(),
            MatMut::rm(&mut cols, rows, small),
        );
        let os = &mut out[s * c_out * big..(s + 1) * c_out * big];
        for (o, chunk) in os.chunks_mut(big).enumerate() {
            chunk.fill(b[o]);
        }
        col2im(&cols, c_out, g, os);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    n: usize,
    c_in: usize,
    w: &[T],
    c_out: usize,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let rows = g.col_rows(c_out);
    let small = g.col_cols();
    let big = g.in_area();
    if let Some(db) = db {
        for s in 0..n {
            for (o, chunk) in dout[s * c_out * big..(s + 1) * c_out * big].chunks(big).enumerate() {
                db[o] += chunk.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); rows * small];
    for s in 0..n {
        im2col(&dout[s * c_out * big..(s + 1) * c_out * big], c_out, g, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::rm(w, c_in, rows),
                MatRef::rm(&dcols, rows, small),
                T::one(),
                MatMut::rm(&mut dx[s * c_in * small..(s + 1) * c_in * small], c_in, small),
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(
                T::one(),
                MatRef::rm(&x[s * c_in * small..(s + 1) * c_in * small], c_in, small),
                MatRef::rm_t(&dcols, small, rows),
                T::one(),
                MatMut::rm(dw, c_in, rows),
            );
        }
    }
}
