//! Convolution and 1x1 projection kernels. Convolutions go through an
//! im2col buffer so the heavy lifting is a single matrix product.

use crate::real::Real;

/// Input row/col for output index `o` at kernel offset `d` (0..3), padding 1.
#[inline(always)]
fn source(o: usize, d: usize, stride: usize, len: usize) -> Option<usize> {
    (o * stride + d).checked_sub(1).filter(|&x| x < len)
}

/// `[ho*wo][9*CI]` patch matrix, tap-major within a row to match the
/// `[tap][ci][co]` weight layout. Padding reads as zero.
fn im2col<T: Real, const CI: usize>(
    input: &[T],
    (h, w): (usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let row = 9 * CI;
    let mut cols = vec![T::zero(); ho * wo * row];
    for i in 0..ho {
        for j in 0..wo {
            let dst = &mut cols[(i * wo + j) * row..][..row];
            for di in 0..3 {
                let Some(r) = source(i, di, stride, h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(c) = source(j, dj, stride, w) else {
                        continue;
                    };
                    let tap = di * 3 + dj;
                    dst[tap * CI..(tap + 1) * CI].copy_from_slice(&input[(r * w + c) * CI..][..CI]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch-matrix gradient back onto the input grid.
fn col2im<T: Real, const CI: usize>(
    cols: &[T],
    (h, w): (usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
    grad_in: &mut [T],
) {
    let row = 9 * CI;
    for i in 0..ho {
        for j in 0..wo {
            let src = &cols[(i * wo + j) * row..][..row];
            for di in 0..3 {
                let Some(r) = source(i, di, stride, h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(c) = source(j, dj, stride, w) else {
                        continue;
                    };
                    let tap = di * 3 + dj;
                    let dst = &mut grad_in[(r * w + c) * CI..][..CI];
                    for (d, s) in dst.iter_mut().zip(&src[tap * CI..(tap + 1) * CI]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn sum_rows_into<T: Real>(x: &[T], out: &mut [T]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

/// 3x3 conv, padding 1, then ReLU. Weights `[tap][ci][co]`.
pub fn conv_relu<T: Real, const CI: usize, const CO: usize>(
    input: &[T],
    in_dims: (usize, usize),
    weight: &[T],
    bias: &[T],
    stride: usize,
    out_dims: (usize, usize),
) -> Vec<T> {
    let p = out_dims.0 * out_dims.1;
    let cols = im2col::<T, CI>(input, in_dims, stride, out_dims);
    let mut out = vec![T::zero(); p * CO];
    T::gemm(
        p,
        9 * CI,
        CO,
        &cols,
        false,
        weight,
        false,
        T::zero(),
        &mut out,
    );
    add_bias(&mut out, &bias[..CO]);
    for v in &mut out {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Backward of [`conv_relu`] given the gradient w.r.t. the pre-activation.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real, const CI: usize, const CO: usize>(
    input: &[T],
    in_dims: (usize, usize),
    weight: &[T],
    stride: usize,
    out_dims: (usize, usize),
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    grad_in: Option<&mut [T]>,
) {
    let p = out_dims.0 * out_dims.1;
    sum_rows_into(&grad_out[..p * CO], &mut grad_b[..CO]);
    let mut cols = im2col::<T, CI>(input, in_dims, stride, out_dims);
    T::gemm(
        9 * CI,
        p,
        CO,
        &cols,
        true,
        grad_out,
        false,
        T::one(),
        grad_w,
    );
    let Some(grad_in) = grad_in else { return };
    T::gemm(
        p,
        CO,
        9 * CI,
        grad_out,
        false,
        weight,
        true,
        T::zero(),
        &mut cols,
    );
    col2im::<T, CI>(&cols, in_dims, stride, out_dims, grad_in);
}

/// `out[p] = bias + sum_ci x[p][ci] * weight[ci]`.
pub fn linear<T: Real, const CI: usize, const CO: usize>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let n = x.len() / CI;
    let mut out = vec![T::zero(); n * CO];
    T::gemm(n, CI, CO, x, false, weight, false, T::zero(), &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, &b[..CO]);
    }
    out
}

pub fn linear_backward<T: Real, const CI: usize, const CO: usize>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
    grad_x: &mut [T],
) {
    let n = x.len() / CI;
    T::gemm(CI, n, CO, x, true, grad_out, false, T::one(), grad_w);
    T::gemm(n, CO, CI, grad_out, false, weight, true, T::one(), grad_x);
    if let Some(gb) = grad_b {
        sum_rows_into(grad_out, &mut gb[..CO]);
    }
}
