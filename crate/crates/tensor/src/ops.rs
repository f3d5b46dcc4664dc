//! Kernels shared by the forward and backward passes.

use crate::real::Real;

/// How [`crate::Tape::batch_norm`] normalizes its input.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with fixed running statistics; a pure affine map.
    Eval { mean: &'a [T], var: &'a [T] },
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `data` laid out with axes reordered so that output axis `i` is
/// input axis `axes[i]`.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += src_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output length of a ceil-mode pooling window sweep; the last window may
/// hang over the end of the input but must start inside it.
pub(crate) fn pool_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    if len <= kernel {
        return 1;
    }
    let mut out = (len - kernel).div_ceil(stride) + 1;
    if (out - 1) * stride >= len {
        out -= 1;
    }
    out
}

/// Unfolds one sample `[c_in, len]` into `[c_in * kernel, out_len]` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    cols: &mut [T],
) {
    for ci in 0..c_in {
        let row_x = &x[ci * len..(ci + 1) * len];
        for k in 0..kernel {
            let row = &mut cols[(ci * kernel + k) * out_len..(ci * kernel + k + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                *slot = if pos >= 0 && (pos as usize) < len {
                    row_x[pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Real>(
    cols: &[T],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    dx: &mut [T],
) {
    for ci in 0..c_in {
        for k in 0..kernel {
            let row = &cols[(ci * kernel + k) * out_len..(ci * kernel + k + 1) * out_len];
            for (t, &g) in row.iter().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[ci * len + pos as usize] += g;
                }
            }
        }
    }
}
