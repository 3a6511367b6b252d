//! Layer forward/backward kernels.
//!
//! Convolution uses cross-correlation semantics (no kernel flip). Every
//! kernel is a pure function: same inputs, bit-identical outputs. Inner loops
//! run over contiguous rows so the compiler can vectorize them.

use thiserror::Error;

use crate::tensor::{Real, ShapeError, TensorOf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
}

fn rank4<S: Real>(
    t: &TensorOf<S>,
    context: &str,
) -> Result<(usize, usize, usize, usize), ShapeError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(ShapeError::new(
            format!("{context}: expected rank-4 tensor"),
            &[0, 0, 0, 0],
            t.shape(),
        )),
    }
}

fn rank2<S: Real>(t: &TensorOf<S>, context: &str) -> Result<(usize, usize), ShapeError> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        _ => Err(ShapeError::new(
            format!("{context}: expected rank-2 tensor"),
            &[0, 0],
            t.shape(),
        )),
    }
}

pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

/// Range of output positions `o` (within `0..count`) for which
/// `o*stride + k_off - pad` lands inside `0..limit`. Returns `(lo, hi)`
/// half-open; empty ranges come back as `lo >= hi`.
fn valid_range(limit: usize, pad: usize, k_off: usize, stride: usize, count: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi = if limit + pad > k_off {
        ((limit + pad - k_off - 1) / stride + 1).min(count)
    } else {
        0
    };
    (lo.min(count), hi)
}

fn check_conv_shapes<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    bias: &TensorOf<S>,
    stride: usize,
    pad: usize,
    context: &str,
) -> Result<(usize, usize, usize, usize, usize, usize, usize), ShapeError> {
    let (n, c_in, h, w) = rank4(input, context)?;
    let (c_out, c_in_w, kh, kw) = rank4(weight, context)?;
    if kh != kw {
        return Err(ShapeError::new(
            format!("{context}: kernel must be square"),
            &[c_out, c_in_w, kh, kh],
            weight.shape(),
        ));
    }
    let k = kh;
    if c_in_w != c_in {
        return Err(ShapeError::new(
            format!("{context}: weight channels do not match input"),
            &[c_out, c_in, k, k],
            weight.shape(),
        ));
    }
    bias.require_shape(&[c_out], context)?;
    if stride < 1 || k > h + 2 * pad || k > w + 2 * pad {
        return Err(ShapeError::new(
            format!("{context}: kernel {k} exceeds padded input (stride {stride})"),
            &[n, c_in, k, k],
            input.shape(),
        ));
    }
    Ok((n, c_in, h, w, c_out, k, stride))
}

/// 2-D cross-correlation: out[n,co,oh,ow] =
/// bias[co] + Σ in[n,ci,oh·s+kh−p, ow·s+kw−p] · w[co,ci,kh,kw].
pub fn conv2d_forward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    bias: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<TensorOf<S>, ShapeError> {
    let (n, c_in, h, w) = rank4(input, "conv2d")?;
    check_conv_shapes(input, weight, bias, stride, pad, "conv2d")?;
    let c_out = weight.shape()[0];
    let k = weight.shape()[2];
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);

    let mut out = TensorOf::zeros(&[n, c_out, oh, ow]);
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for ni in 0..n {
        for co in 0..c_out {
            let plane = &mut od[(ni * c_out + co) * oh * ow..][..oh * ow];
            plane.fill(bd[co]);
            for ci in 0..c_in {
                let in_plane = &xd[(ni * c_in + ci) * h * w..][..h * w];
                for kh in 0..k {
                    for kw in 0..k {
                        let ws = wd[((co * c_in + ci) * k + kh) * k + kw];
                        let (oh_lo, oh_hi) = valid_range(h, pad, kh, stride, oh);
                        let (ow_lo, ow_hi) = valid_range(w, pad, kw, stride, ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + kh - pad;
                            let in_row = &in_plane[ih * w..][..w];
                            let out_row = &mut plane[ohi * ow..][..ow];
                            if stride == 1 {
                                let off = ow_lo + kw - pad;
                                for (o, &x) in out_row[ow_lo..ow_hi]
                                    .iter_mut()
                                    .zip(&in_row[off..off + (ow_hi - ow_lo)])
                                {
                                    *o += ws * x;
                                }
                            } else {
                                for owi in ow_lo..ow_hi {
                                    out_row[owi] += ws * in_row[owi * stride + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.debug_assert_finite("conv2d_forward");
    Ok(out)
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    grad_out: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>), ShapeError> {
    let (n, c_in, h, w) = rank4(input, "conv2d_backward")?;
    let (c_out, _, k, _) = rank4(weight, "conv2d_backward")?;
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    grad_out.require_shape(&[n, c_out, oh, ow], "conv2d_backward grad_out")?;
    if weight.shape()[1] != c_in {
        return Err(ShapeError::new(
            "conv2d_backward: weight channels do not match input",
            &[c_out, c_in, k, k],
            weight.shape(),
        ));
    }

    let mut grad_input = TensorOf::zeros(&[n, c_in, h, w]);
    let mut grad_weight = TensorOf::zeros(&[c_out, c_in, k, k]);
    let mut grad_bias = TensorOf::zeros(&[c_out]);
    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();

    {
        let gb = grad_bias.data_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let g_plane = &gd[(ni * c_out + co) * oh * ow..][..oh * ow];
                let mut acc = S::zero();
                for &g in g_plane {
                    acc += g;
                }
                gb[co] += acc;
            }
        }
    }

    {
        let gi = grad_input.data_mut();
        let gw = grad_weight.data_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let g_plane = &gd[(ni * c_out + co) * oh * ow..][..oh * ow];
                for ci in 0..c_in {
                    let in_plane = &xd[(ni * c_in + ci) * h * w..][..h * w];
                    let gi_plane = &mut gi[(ni * c_in + ci) * h * w..][..h * w];
                    for kh in 0..k {
                        for kw in 0..k {
                            let widx = ((co * c_in + ci) * k + kh) * k + kw;
                            let ws = wd[widx];
                            let mut wacc = S::zero();
                            let (oh_lo, oh_hi) = valid_range(h, pad, kh, stride, oh);
                            let (ow_lo, ow_hi) = valid_range(w, pad, kw, stride, ow);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for ohi in oh_lo..oh_hi {
                                let ih = ohi * stride + kh - pad;
                                let g_row = &g_plane[ohi * ow..][..ow];
                                let in_row = &in_plane[ih * w..][..w];
                                let gi_row = &mut gi_plane[ih * w..][..w];
                                if stride == 1 {
                                    let off = ow_lo + kw - pad;
                                    for ((gi_v, &x), &g) in gi_row[off..off + (ow_hi - ow_lo)]
                                        .iter_mut()
                                        .zip(&in_row[off..off + (ow_hi - ow_lo)])
                                        .zip(&g_row[ow_lo..ow_hi])
                                    {
                                        *gi_v += ws * g;
                                        wacc += x * g;
                                    }
                                } else {
                                    for owi in ow_lo..ow_hi {
                                        let iw = owi * stride + kw - pad;
                                        let g = g_row[owi];
                                        gi_row[iw] += ws * g;
                                        wacc += in_row[iw] * g;
                                    }
                                }
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    grad_input.debug_assert_finite("conv2d_backward");
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn transposed_conv_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    ((extent - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .filter(|&e| e >= 1)
}

/// Adjoint of [`conv2d_forward`]: weight layout is `[Cin_t, Cout_t, k, k]`
/// where `Cin_t` is this layer's input channel count. With the same weight
/// tensor, ⟨conv(x), y⟩ == ⟨x, transposed_conv(y)⟩ (plus bias on the output).
pub fn transposed_conv2d_forward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    bias: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<TensorOf<S>, ShapeError> {
    let (n, c_in, h, w) = rank4(input, "transposed_conv2d")?;
    let (c_in_w, c_out, kh, kw) = rank4(weight, "transposed_conv2d")?;
    if kh != kw || c_in_w != c_in {
        return Err(ShapeError::new(
            "transposed_conv2d: weight does not match input channels",
            &[c_in, c_out, kh, kh],
            weight.shape(),
        ));
    }
    let k = kh;
    bias.require_shape(&[c_out], "transposed_conv2d bias")?;
    let (out_h, out_w) = match (
        transposed_conv_out_extent(h, k, stride, pad),
        transposed_conv_out_extent(w, k, stride, pad),
    ) {
        (Some(oh), Some(ow)) if stride >= 1 => (oh, ow),
        _ => {
            return Err(ShapeError::new(
                "transposed_conv2d: kernel/pad combination produces empty output",
                &[n, c_out, 1, 1],
                input.shape(),
            ))
        }
    };

    let mut out = TensorOf::zeros(&[n, c_out, out_h, out_w]);
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();

    for ni in 0..n {
        for co in 0..c_out {
            od[(ni * c_out + co) * out_h * out_w..][..out_h * out_w].fill(bd[co]);
        }
        for ci in 0..c_in {
            let in_plane = &xd[(ni * c_in + ci) * h * w..][..h * w];
            for co in 0..c_out {
                let out_plane = &mut od[(ni * c_out + co) * out_h * out_w..][..out_h * out_w];
                for kh_i in 0..k {
                    for kw_i in 0..k {
                        let ws = wd[((ci * c_out + co) * k + kh_i) * k + kw_i];
                        let (h_lo, h_hi) = valid_range(out_h, pad, kh_i, stride, h);
                        let (w_lo, w_hi) = valid_range(out_w, pad, kw_i, stride, w);
                        if w_lo >= w_hi {
                            continue;
                        }
                        for hi in h_lo..h_hi {
                            let ohi = hi * stride + kh_i - pad;
                            let in_row = &in_plane[hi * w..][..w];
                            let out_row = &mut out_plane[ohi * out_w..][..out_w];
                            if stride == 1 {
                                let off = w_lo + kw_i - pad;
                                for (&x, o) in in_row[w_lo..w_hi]
                                    .iter()
                                    .zip(&mut out_row[off..off + (w_hi - w_lo)])
                                {
                                    *o += ws * x;
                                }
                            } else {
                                for wi in w_lo..w_hi {
                                    out_row[wi * stride + kw_i - pad] += ws * in_row[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.debug_assert_finite("transposed_conv2d_forward");
    Ok(out)
}

/// Gradients of [`transposed_conv2d_forward`].
pub fn transposed_conv2d_backward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    grad_out: &TensorOf<S>,
    stride: usize,
    pad: usize,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>), ShapeError> {
    let (n, c_in, h, w) = rank4(input, "transposed_conv2d_backward")?;
    let (_, c_out, k, _) = rank4(weight, "transposed_conv2d_backward")?;
    let out_h = transposed_conv_out_extent(h, k, stride, pad)
        .ok_or_else(|| ShapeError::new("transposed_conv2d_backward: empty output", &[1], &[0]))?;
    let out_w = transposed_conv_out_extent(w, k, stride, pad)
        .ok_or_else(|| ShapeError::new("transposed_conv2d_backward: empty output", &[1], &[0]))?;
    grad_out.require_shape(
        &[n, c_out, out_h, out_w],
        "transposed_conv2d_backward grad_out",
    )?;

    let mut grad_input = TensorOf::zeros(&[n, c_in, h, w]);
    let mut grad_weight = TensorOf::zeros(weight.shape());
    let mut grad_bias = TensorOf::zeros(&[c_out]);
    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();

    {
        let gb = grad_bias.data_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let mut acc = S::zero();
                for &g in &gd[(ni * c_out + co) * out_h * out_w..][..out_h * out_w] {
                    acc += g;
                }
                gb[co] += acc;
            }
        }
    }

    {
        let gi = grad_input.data_mut();
        let gw = grad_weight.data_mut();
        for ni in 0..n {
            for ci in 0..c_in {
                let in_plane = &xd[(ni * c_in + ci) * h * w..][..h * w];
                let gi_plane = &mut gi[(ni * c_in + ci) * h * w..][..h * w];
                for co in 0..c_out {
                    let g_plane = &gd[(ni * c_out + co) * out_h * out_w..][..out_h * out_w];
                    for kh_i in 0..k {
                        for kw_i in 0..k {
                            let widx = ((ci * c_out + co) * k + kh_i) * k + kw_i;
                            let ws = wd[widx];
                            let mut wacc = S::zero();
                            let (h_lo, h_hi) = valid_range(out_h, pad, kh_i, stride, h);
                            let (w_lo, w_hi) = valid_range(out_w, pad, kw_i, stride, w);
                            if w_lo >= w_hi {
                                continue;
                            }
                            for hi in h_lo..h_hi {
                                let ohi = hi * stride + kh_i - pad;
                                let g_row = &g_plane[ohi * out_w..][..out_w];
                                let in_row = &in_plane[hi * w..][..w];
                                let gi_row = &mut gi_plane[hi * w..][..w];
                                if stride == 1 {
                                    let off = w_lo + kw_i - pad;
                                    for ((gi_v, &x), &g) in gi_row[w_lo..w_hi]
                                        .iter_mut()
                                        .zip(&in_row[w_lo..w_hi])
                                        .zip(&g_row[off..off + (w_hi - w_lo)])
                                    {
                                        *gi_v += ws * g;
                                        wacc += x * g;
                                    }
                                } else {
                                    for wi in w_lo..w_hi {
                                        let g = g_row[wi * stride + kw_i - pad];
                                        gi_row[wi] += ws * g;
                                        wacc += in_row[wi] * g;
                                    }
                                }
                            }
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    grad_input.debug_assert_finite("transposed_conv2d_backward");
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn relu_forward<S: Real>(input: &TensorOf<S>) -> TensorOf<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Routes gradient through positions where the forward input was positive.
pub fn relu_backward<S: Real>(
    input: &TensorOf<S>,
    grad_out: &TensorOf<S>,
) -> Result<TensorOf<S>, ShapeError> {
    grad_out.require_shape(input.shape(), "relu_backward grad_out")?;
    let mut grad = TensorOf::zeros(input.shape());
    for ((g, &x), &go) in grad
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
    {
        if x > S::zero() {
            *g = go;
        }
    }
    Ok(grad)
}

pub fn tanh_forward<S: Real>(input: &TensorOf<S>) -> TensorOf<S> {
    let out = input.map(|v| v.tanh());
    out.debug_assert_finite("tanh_forward");
    out
}

/// Backward uses the cached forward *output*: d tanh = 1 − tanh².
pub fn tanh_backward<S: Real>(
    output: &TensorOf<S>,
    grad_out: &TensorOf<S>,
) -> Result<TensorOf<S>, ShapeError> {
    grad_out.require_shape(output.shape(), "tanh_backward grad_out")?;
    let mut grad = TensorOf::zeros(output.shape());
    for ((g, &y), &go) in grad
        .data_mut()
        .iter_mut()
        .zip(output.data())
        .zip(grad_out.data())
    {
        *g = go * (S::one() - y * y);
    }
    Ok(grad)
}

/// 2×2 max pooling with stride 2 (odd trailing row/column dropped). Returns
/// the pooled tensor plus, per output element, the flat input index of its
/// maximum; ties go to the first element in row-major window order.
pub fn maxpool2x2_forward<S: Real>(
    input: &TensorOf<S>,
) -> Result<(TensorOf<S>, Vec<u32>), ShapeError> {
    let (n, c, h, w) = rank4(input, "maxpool2x2")?;
    if h < 2 || w < 2 {
        return Err(ShapeError::new(
            "maxpool2x2: input smaller than window",
            &[n, c, 2, 2],
            input.shape(),
        ));
    }
    let oh = h / 2;
    let ow = w / 2;
    let mut out = TensorOf::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = input.data();
    let od = out.data_mut();
    for plane_i in 0..n * c {
        let base = plane_i * h * w;
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best_idx = base + (2 * ohi) * w + 2 * owi;
                let mut best = xd[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * ohi + dy) * w + 2 * owi + dx;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_idx = idx;
                    }
                }
                let o = (plane_i * oh + ohi) * ow + owi;
                od[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatters each output gradient back to the argmax position recorded by the
/// forward pass.
pub fn maxpool2x2_backward<S: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &TensorOf<S>,
) -> Result<TensorOf<S>, ShapeError> {
    if grad_out.numel() != argmax.len() {
        return Err(ShapeError::new(
            "maxpool2x2_backward: argmax/grad size mismatch",
            &[argmax.len()],
            grad_out.shape(),
        ));
    }
    let mut grad = TensorOf::zeros(input_shape);
    let gd = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx as usize] += g;
    }
    Ok(grad)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x_nearest_forward<S: Real>(input: &TensorOf<S>) -> Result<TensorOf<S>, ShapeError> {
    let (n, c, h, w) = rank4(input, "upsample2x")?;
    let mut out = TensorOf::zeros(&[n, c, 2 * h, 2 * w]);
    let xd = input.data();
    let od = out.data_mut();
    for plane_i in 0..n * c {
        for hi in 0..h {
            let in_row = &xd[plane_i * h * w + hi * w..][..w];
            for dy in 0..2 {
                let out_row = &mut od[plane_i * 4 * h * w + (2 * hi + dy) * 2 * w..][..2 * w];
                for (wi, &x) in in_row.iter().enumerate() {
                    out_row[2 * wi] = x;
                    out_row[2 * wi + 1] = x;
                }
            }
        }
    }
    Ok(out)
}

/// Each input cell accumulates the gradient of the 2×2 block it produced.
pub fn upsample2x_nearest_backward<S: Real>(
    input_shape: &[usize],
    grad_out: &TensorOf<S>,
) -> Result<TensorOf<S>, ShapeError> {
    let [n, c, h, w] = *input_shape else {
        return Err(ShapeError::new(
            "upsample2x_backward: expected rank-4 input shape",
            &[0, 0, 0, 0],
            input_shape,
        ));
    };
    grad_out.require_shape(&[n, c, 2 * h, 2 * w], "upsample2x_backward grad_out")?;
    let mut grad = TensorOf::zeros(input_shape);
    let gd = grad.data_mut();
    let god = grad_out.data();
    for plane_i in 0..n * c {
        for hi in 0..h {
            let g_row = &mut gd[plane_i * h * w + hi * w..][..w];
            for dy in 0..2 {
                let go_row = &god[plane_i * 4 * h * w + (2 * hi + dy) * 2 * w..][..2 * w];
                for (wi, g) in g_row.iter_mut().enumerate() {
                    *g += go_row[2 * wi] + go_row[2 * wi + 1];
                }
            }
        }
    }
    Ok(grad)
}

/// Fully connected layer: out = input · weight + bias with weight `[D, U]`.
pub fn dense_forward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    bias: &TensorOf<S>,
) -> Result<TensorOf<S>, ShapeError> {
    let (n, d) = rank2(input, "dense")?;
    let (dw, u) = rank2(weight, "dense weight")?;
    if dw != d {
        return Err(ShapeError::new("dense: weight rows must match input", &[d, u], weight.shape()));
    }
    bias.require_shape(&[u], "dense bias")?;
    let mut out = TensorOf::zeros(&[n, u]);
    let xd = input.data();
    let wd = weight.data();
    let od = out.data_mut();
    for ni in 0..n {
        let out_row = &mut od[ni * u..][..u];
        out_row.copy_from_slice(bias.data());
        for di in 0..d {
            let x = xd[ni * d + di];
            for (o, &wv) in out_row.iter_mut().zip(&wd[di * u..][..u]) {
                *o += x * wv;
            }
        }
    }
    out.debug_assert_finite("dense_forward");
    Ok(out)
}

pub fn dense_backward<S: Real>(
    input: &TensorOf<S>,
    weight: &TensorOf<S>,
    grad_out: &TensorOf<S>,
) -> Result<(TensorOf<S>, TensorOf<S>, TensorOf<S>), ShapeError> {
    let (n, d) = rank2(input, "dense_backward")?;
    let (_, u) = rank2(weight, "dense_backward weight")?;
    grad_out.require_shape(&[n, u], "dense_backward grad_out")?;
    let mut grad_input = TensorOf::zeros(&[n, d]);
    let mut grad_weight = TensorOf::zeros(weight.shape());
    let mut grad_bias = TensorOf::zeros(&[u]);
    let xd = input.data();
    let wd = weight.data();
    let gd = grad_out.data();
    {
        let gi = grad_input.data_mut();
        let gw = grad_weight.data_mut();
        for ni in 0..n {
            let g_row = &gd[ni * u..][..u];
            for di in 0..d {
                let w_row = &wd[di * u..][..u];
                let mut acc = S::zero();
                for (&g, &wv) in g_row.iter().zip(w_row) {
                    acc += g * wv;
                }
                gi[ni * d + di] = acc;
                let x = xd[ni * d + di];
                for (gwv, &g) in gw[di * u..][..u].iter_mut().zip(g_row) {
                    *gwv += x * g;
                }
            }
        }
    }
    {
        let gb = grad_bias.data_mut();
        for ni in 0..n {
            for (b, &g) in gb.iter_mut().zip(&gd[ni * u..][..u]) {
                *b += g;
            }
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// Mean cross-entropy over the batch plus its gradient w.r.t. the logits
/// (softmax(logits) − onehot(labels), divided by N). Stabilized by
/// max-subtraction.
pub fn softmax_cross_entropy<S: Real>(
    logits: &TensorOf<S>,
    labels: &[usize],
) -> Result<(S, TensorOf<S>), OpsError> {
    let (n, k) = rank2(logits, "softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(ShapeError::new(
            "softmax_cross_entropy: one label per row",
            &[n],
            &[labels.len()],
        )
        .into());
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(OpsError::LabelOutOfRange {
                row,
                label,
                classes: k,
            });
        }
    }
    let mut grad = TensorOf::zeros(&[n, k]);
    let xd = logits.data();
    let gd = grad.data_mut();
    let inv_n = S::one() / S::from_f64(n as f64);
    let mut loss = S::zero();
    for ni in 0..n {
        let row = &xd[ni * k..][..k];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = S::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln();
        loss += log_sum - (row[labels[ni]] - max);
        let g_row = &mut gd[ni * k..][..k];
        for (g, &v) in g_row.iter_mut().zip(row) {
            *g = (v - max).exp() / sum * inv_n;
        }
        g_row[labels[ni]] -= inv_n;
    }
    loss *= inv_n;
    grad.debug_assert_finite("softmax_cross_entropy");
    Ok((loss, grad))
}

/// Plain SGD: p ← p − lr·g, elementwise, no momentum.
pub fn sgd_step<S: Real>(
    params: &mut [TensorOf<S>],
    grads: &[TensorOf<S>],
    lr: S,
) -> Result<(), ShapeError> {
    assert!(lr > S::zero(), "learning rate must be positive");
    if params.len() != grads.len() {
        return Err(ShapeError::new(
            "sgd_step: one gradient per parameter",
            &[params.len()],
            &[grads.len()],
        ));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        g.require_shape(p.shape(), "sgd_step gradient")?;
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
