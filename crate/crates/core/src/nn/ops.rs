//! Forward and backward kernels for the layers the feature extractor uses.
//!
//! Every op is a pair of free functions: the forward pass and a backward
//! pass that maps an upstream gradient to gradients of the op's inputs.
//! The model module chains them into a fixed reverse-mode tape.

use rayon::prelude::*;

use super::tensor::{ensure_same_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Added under the square root of every Euclidean distance.
pub const DISTANCE_EPS: f64 = 1e-12;

/// Margin removed from each side by [`crop2d`].
pub const CROP_MARGIN: usize = 2;

const KERNEL: usize = 3;

/// Output rows below this count are computed on the calling thread.
const PARALLEL_ROWS_MIN_ELEMS: usize = 1 << 16;

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = input.dims3()?;
    let (kcin, cout) = match kernels.shape() {
        &[KERNEL, KERNEL, kcin, cout] => (kcin, cout),
        s => {
            return Err(Error::invalid(format!(
                "conv2d_valid: kernels must be 3x3xCinxCout, got {s:?}"
            )))
        }
    };
    if kcin != cin {
        return Err(Error::invalid(format!(
            "conv2d_valid: input has {cin} channels but kernels expect {kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::invalid(format!(
            "conv2d_valid: bias shape {:?} does not match {cout} filters",
            bias.shape()
        )));
    }
    if h < KERNEL || w < KERNEL {
        return Err(Error::invalid(format!(
            "conv2d_valid: input {h}x{w} is smaller than the 3x3 kernel"
        )));
    }
    Ok((h, w, cin, cout))
}

/// 3x3 cross-correlation, stride 1, no padding.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin, cout) = conv_dims(input, kernels, bias)?;
    let (ho, wo) = (h - 2, w - 2);
    let mut out = vec![T::zero(); ho * wo * cout];
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let row_len = wo * cout;

    let compute_row = |y: usize, out_row: &mut [T]| {
        for px in out_row.chunks_exact_mut(cout) {
            px.copy_from_slice(b);
        }
        for ky in 0..KERNEL {
            let a = &x[(y + ky) * w * cin..(y + ky + 1) * w * cin];
            let kb = &k[ky * KERNEL * cin * cout..(ky + 1) * KERNEL * cin * cout];
            // Row x of the A view is the 3*cin window starting at column x;
            // consecutive windows overlap, so the row stride is cin.
            unsafe {
                T::gemm(
                    wo,
                    KERNEL * cin,
                    cout,
                    T::one(),
                    a.as_ptr(),
                    cin as isize,
                    1,
                    kb.as_ptr(),
                    cout as isize,
                    1,
                    T::one(),
                    out_row.as_mut_ptr(),
                    cout as isize,
                    1,
                );
            }
        }
    };

    if out.len() >= PARALLEL_ROWS_MIN_ELEMS {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| compute_row(y, row));
    } else {
        out.chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| compute_row(y, row));
    }
    Tensor::new(vec![ho, wo, cout], out)
}

/// Gradients of [`conv2d_valid`]. `input` is `None` when it was not requested.
#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_valid_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let (h, w, cin) = input.dims3()?;
    let cout = *kernels.shape().last().unwrap_or(&0);
    let (ho, wo) = (h.saturating_sub(2), w.saturating_sub(2));
    if grad_out.shape() != [ho, wo, cout] || kernels.shape() != [KERNEL, KERNEL, cin, cout] {
        return Err(Error::invalid(format!(
            "conv2d_valid_backward: grad {:?} / kernels {:?} inconsistent with input {:?}",
            grad_out.shape(),
            kernels.shape(),
            input.shape()
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let window = KERNEL * cin;
    let col_len = KERNEL * window;

    let mut gb = vec![T::zero(); cout];
    for px in g.chunks_exact(cout) {
        for (acc, &v) in gb.iter_mut().zip(px) {
            *acc += v;
        }
    }

    let mut gk = vec![T::zero(); k.len()];
    for y in 0..ho {
        let g_row = &g[y * wo * cout..(y + 1) * wo * cout];
        for ky in 0..KERNEL {
            let a = &x[(y + ky) * w * cin..(y + ky + 1) * w * cin];
            let c = &mut gk[ky * window * cout..(ky + 1) * window * cout];
            // gk[ky] (3cin x cout) += A^T (3cin x wo) * G_row (wo x cout)
            unsafe {
                T::gemm(
                    window,
                    wo,
                    cout,
                    T::one(),
                    a.as_ptr(),
                    1,
                    cin as isize,
                    g_row.as_ptr(),
                    cout as isize,
                    1,
                    T::one(),
                    c.as_mut_ptr(),
                    cout as isize,
                    1,
                );
            }
        }
    }

    let gin = if want_input_grad {
        let mut gin = vec![T::zero(); x.len()];
        let mut col = vec![T::zero(); wo * col_len];
        for y in 0..ho {
            let g_row = &g[y * wo * cout..(y + 1) * wo * cout];
            // col (wo x 9cin) = G_row (wo x cout) * K^T (cout x 9cin)
            unsafe {
                T::gemm(
                    wo,
                    cout,
                    col_len,
                    T::one(),
                    g_row.as_ptr(),
                    cout as isize,
                    1,
                    k.as_ptr(),
                    1,
                    cout as isize,
                    T::zero(),
                    col.as_mut_ptr(),
                    col_len as isize,
                    1,
                );
            }
            for (xo, patch) in col.chunks_exact(col_len).enumerate() {
                for ky in 0..KERNEL {
                    let start = (y + ky) * w * cin + xo * cin;
                    let dst = &mut gin[start..start + window];
                    for (d, &s) in dst.iter_mut().zip(&patch[ky * window..(ky + 1) * window]) {
                        *d += s;
                    }
                }
            }
        }
        Some(Tensor::new(input.shape().to_vec(), gin)?)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input: gin,
        kernels: Tensor::new(kernels.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// In-place variant used on freshly produced activations.
pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Gradient of ReLU. `activation` may be either the ReLU input or its
/// output: both are positive at exactly the same positions.
pub fn relu_backward<T: Scalar>(activation: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(activation, grad_out, "relu_backward")?;
    let data = activation
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(activation.shape().to_vec(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, for every
/// output element, the flat input index that produced it.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = x.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "maxpool2x2: input {h}x{w} is smaller than 2x2"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut argmax = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for xo in 0..wo {
            for ch in 0..c {
                let mut best_idx = ((2 * y) * w + 2 * xo) * c + ch;
                let mut best = d[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
                    // strict: ties keep the earlier element in scan order
                    if d[idx] > best {
                        best = d[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![ho, wo, c], out)?, argmax))
}

pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::invalid(
            "maxpool2x2_backward: argmax/grad length mismatch",
        ));
    }
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    Ok(gin)
}

/// Removes a 2-pixel border on every side.
pub fn crop2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    let m = CROP_MARGIN;
    if h <= 2 * m || w <= 2 * m {
        return Err(Error::invalid(format!(
            "crop2d: input {h}x{w} is too small to crop by 2"
        )));
    }
    let (ho, wo) = (h - 2 * m, w - 2 * m);
    let d = x.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        let start = ((y + m) * w + m) * c;
        out.extend_from_slice(&d[start..start + wo * c]);
    }
    Tensor::new(vec![ho, wo, c], out)
}

pub fn crop2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[h, w, c] = input_shape else {
        return Err(Error::invalid(
            "crop2d_backward: input shape must be rank 3",
        ));
    };
    let m = CROP_MARGIN;
    if grad_out.shape() != [h - 2 * m, w - 2 * m, c] {
        return Err(Error::invalid("crop2d_backward: gradient shape mismatch"));
    }
    let wo = w - 2 * m;
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (y, row) in grad_out.data().chunks_exact(wo * c).enumerate() {
        let start = ((y + m) * w + m) * c;
        gd[start..start + wo * c].copy_from_slice(row);
    }
    Ok(gin)
}

pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(x, y, "add")?;
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `sqrt(sum_i (a_i - b_i)^2 + eps)`.
pub fn euclidean_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    ensure_same_shape(a, b, "euclidean_distance")?;
    Ok(squared_distance(a.data(), b.data())).map(|s| (s + T::from_f64_lossy(DISTANCE_EPS)).sqrt())
}

pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Gradients of `upstream * euclidean_distance(a, b)` w.r.t. `a` and `b`,
/// given the already computed `distance`.
pub fn euclidean_distance_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    distance: T,
    upstream: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_same_shape(a, b, "euclidean_distance_backward")?;
    let scale = upstream / distance;
    let ga: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * scale)
        .collect();
    let gb = ga.iter().map(|&v| -v).collect();
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

pub fn softmax2<T: Scalar>(v: [T; 2]) -> [T; 2] {
    let m = v[0].max(v[1]);
    let e0 = (v[0] - m).exp();
    let e1 = (v[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Vector-Jacobian product of [`softmax2`] given its output `probs`.
pub fn softmax2_backward<T: Scalar>(probs: [T; 2], grad_out: [T; 2]) -> [T; 2] {
    let dot = probs[0] * grad_out[0] + probs[1] * grad_out[1];
    [
        probs[0] * (grad_out[0] - dot),
        probs[1] * (grad_out[1] - dot),
    ]
}

pub fn mae_loss<T: Scalar>(pred: [T; 2], target: [T; 2]) -> T {
    ((pred[0] - target[0]).abs() + (pred[1] - target[1]).abs()) / T::from_f64_lossy(2.0)
}

/// Subgradient of [`mae_loss`]; zero where a component equals its target.
pub fn mae_loss_backward<T: Scalar>(pred: [T; 2], target: [T; 2]) -> [T; 2] {
    let half = T::from_f64_lossy(0.5);
    let sign = |d: T| {
        if d > T::zero() {
            half
        } else if d < T::zero() {
            -half
        } else {
            T::zero()
        }
    };
    [sign(pred[0] - target[0]), sign(pred[1] - target[1])]
}
