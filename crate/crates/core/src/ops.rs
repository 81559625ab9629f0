//! Forward kernels for VGG-style stacks.
//!
//! All products accumulate in `f64` and round once into the `f32` output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where each max-pool output cell took its value from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    pub input_shape: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    /// Flat index into the pooled input, one per output cell.
    pub indices: Vec<usize>,
}

pub(crate) fn conv_output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output positions `lo..hi` whose tap `off` lands inside `0..n_in`.
#[inline]
pub(crate) fn valid_range(n_out: usize, n_in: usize, off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + off - pad
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > off {
        ((n_in + pad - off - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape()[..] {
        [o, c, kh, kw] => Ok((o, c, kh, kw)),
        _ => Err(Error::Shape(format!(
            "conv kernel must be (out, in, kh, kw), got {:?}",
            kernel.shape()
        ))),
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, kc, kh, kw) = kernel_dims(kernel)?;
    if kc != c {
        return Err(Error::Shape(format!(
            "kernel expects {kc} input channels, input has {c}"
        )));
    }
    if bias.len() != o {
        return Err(Error::Shape(format!(
            "bias has {} entries for {o} output channels",
            bias.len()
        )));
    }
    let oh = conv_output_extent(h, kh, stride, pad)?;
    let ow = conv_output_extent(w, kw, stride, pad)?;

    let k = kernel.data();
    let mut out = Vec::with_capacity(o * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for oc in 0..o {
        acc.fill(bias[oc] as f64);
        for ic in 0..c {
            let plane = input.channel(ic);
            for i in 0..kh {
                let (y0, y1) = valid_range(oh, h, i, stride, pad);
                for j in 0..kw {
                    let wv = k[((oc * c + ic) * kh + i) * kw + j] as f64;
                    let (x0, x1) = valid_range(ow, w, j, stride, pad);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * stride + i - pad;
                        let ix0 = x0 * stride + j - pad;
                        let row = &plane[iy * w..(iy + 1) * w];
                        let arow = &mut acc[oy * ow + x0..oy * ow + x1];
                        if stride == 1 {
                            for (a, &x) in arow.iter_mut().zip(&row[ix0..]) {
                                *a += wv * x as f64;
                            }
                        } else {
                            for (a, &x) in arow.iter_mut().zip(row[ix0..].iter().step_by(stride)) {
                                *a += wv * x as f64;
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![o, oh, ow], out)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Ties go to the smallest flat index inside the window.
pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolSwitches)> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be at least 1".into()));
    }
    if window > h || window > w {
        return Err(Error::Config(format!(
            "pool window {window} exceeds input extent {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = data[best_idx];
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if data[idx] > best || best.is_nan() && !data[idx].is_nan() {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                indices.push(best_idx);
            }
        }
    }
    let switches = PoolSwitches {
        input_shape: input.shape().to_vec(),
        window,
        stride,
        indices,
    };
    Ok((Tensor::new(vec![c, oh, ow], out)?, switches))
}

/// `weights · input + bias` with `weights` shaped `(m, n)`.
pub fn dense_forward(input: &[f32], weights: &Tensor, bias: &[f32]) -> Result<Vec<f32>> {
    let (m, n) = match weights.shape()[..] {
        [m, n] => (m, n),
        _ => {
            return Err(Error::Shape(format!(
                "dense weights must be (out, in), got {:?}",
                weights.shape()
            )))
        }
    };
    if input.len() != n {
        return Err(Error::Shape(format!(
            "dense layer expects {n} inputs, got {}",
            input.len()
        )));
    }
    if bias.len() != m {
        return Err(Error::Shape(format!("bias has {} entries for {m} outputs", bias.len())));
    }
    Ok(weights
        .data()
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, &b)| {
            let s: f64 = row.iter().zip(input).map(|(&a, &x)| a as f64 * x as f64).sum();
            (s + b as f64) as f32
        })
        .collect())
}

pub fn softmax(scores: &[f32]) -> Result<Vec<f32>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax of an empty vector".into()));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in softmax input".into()));
    }
    let max = scores.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = scores.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / total) as f32).collect())
}
