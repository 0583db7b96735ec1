//! 2-D convolution family on [C,H,W] tensors: cross-correlation forward,
//! spatially separable factorization, transposed convolution (the exact
//! adjoint), batch normalization, pooling and nearest-neighbor upsampling.
//!
//! Convolution uses the cross-correlation convention (no kernel flip);
//! with learned weights the two conventions are equivalent, and all test
//! oracles in this crate follow the same convention.

use super::ops::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Per-axis stride and padding for a convolution pass. Symmetric wrappers
/// cover the common case; the separable path splits padding by axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn symmetric(stride: usize, padding: usize) -> Conv2dGeom {
        Conv2dGeom {
            stride_h: stride,
            stride_w: stride,
            pad_h: padding,
            pad_w: padding,
        }
    }

    fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if k > len + 2 * pad {
            return Err(Error::Config(format!(
                "kernel extent {k} exceeds padded input extent {}",
                len + 2 * pad
            )));
        }
        Ok((len + 2 * pad - k) / stride + 1)
    }
}

fn conv_dims(input: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d kernel must be [C_out,C_in,kh,kw], got {:?}",
            kernel.shape()
        )));
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if ci != kci {
        return Err(Error::Config(format!(
            "conv2d channel mismatch: input has {ci} channels (shape {:?}) but kernel expects {kci} (shape {:?})",
            input.shape(),
            kernel.shape()
        )));
    }
    Ok((ci, h, w, co, kh, kw))
}

/// Gather padded input patches into a [ci*kh*kw, ho*wo] matrix.
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; ci * kh * kw * ho * wo];
    let cols = ho * wo;
    for c in 0..ci {
        for m in 0..kh {
            for n in 0..kw {
                let row = (c * kh + m) * kw + n;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..ho {
                    let ii = (oi * geom.stride_h + m) as isize - geom.pad_h as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * geom.stride_w + n) as isize - geom.pad_w as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * wo + oj] = x[src_row + jj as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a [ci*kh*kw, ho*wo] column matrix back onto a [ci,h,w] image.
fn col2im(
    col: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: Conv2dGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; ci * h * w];
    let cols = ho * wo;
    for c in 0..ci {
        for m in 0..kh {
            for n in 0..kw {
                let row = (c * kh + m) * kw + n;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..ho {
                    let ii = (oi * geom.stride_h + m) as isize - geom.pad_h as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * geom.stride_w + n) as isize - geom.pad_w as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[dst_row + jj as usize] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,kh,kw]
/// kernel, with per-axis stride/padding. Differentiable w.r.t. input,
/// kernel and bias.
pub fn conv2d_asym(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    geom: Conv2dGeom,
) -> Result<Tensor> {
    let (ci, h, w, co, kh, kw) = conv_dims(input, kernel)?;
    if let Some(b) = bias {
        if b.rank() != 1 || b.numel() != co {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{co}], got {:?}",
                b.shape()
            )));
        }
    }
    let ho = Conv2dGeom::out_extent(h, kh, geom.stride_h, geom.pad_h)?;
    let wo = Conv2dGeom::out_extent(w, kw, geom.stride_w, geom.pad_w)?;

    let col = im2col(input.values(), ci, h, w, kh, kw, geom, ho, wo);
    let mut values = vec![0.0; co * ho * wo];
    // [co, ci*kh*kw] x [ci*kh*kw, ho*wo]
    gemm(
        false,
        false,
        co,
        ci * kh * kw,
        ho * wo,
        1.0,
        kernel.values(),
        &col,
        0.0,
        &mut values,
    );
    if let Some(b) = bias {
        let bv = b.values();
        for c in 0..co {
            for v in &mut values[c * ho * wo..(c + 1) * ho * wo] {
                *v += bv[c];
            }
        }
    }

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![co, ho, wo],
        values,
        parents,
        Box::new(move |_out, parents, gy| {
            let input = &parents[0];
            let kernel = &parents[1];
            let kk = ci * kh * kw;
            let cols = ho * wo;
            let d_input = input.requires_grad().then(|| {
                // dX = col2im(K^T * dY)
                let mut dcol = vec![0.0; kk * cols];
                gemm(true, false, kk, co, cols, 1.0, kernel.values(), gy, 0.0, &mut dcol);
                col2im(&dcol, ci, h, w, kh, kw, geom, ho, wo)
            });
            let d_kernel = kernel.requires_grad().then(|| {
                // dK = dY * col(X)^T
                let col = im2col(input.values(), ci, h, w, kh, kw, geom, ho, wo);
                let mut dk = vec![0.0; co * kk];
                gemm(false, true, co, cols, kk, 1.0, gy, &col, 0.0, &mut dk);
                dk
            });
            let mut grads = vec![d_input, d_kernel];
            if parents.len() == 3 {
                grads.push(parents[2].requires_grad().then(|| {
                    (0..co)
                        .map(|c| gy[c * cols..(c + 1) * cols].iter().sum())
                        .collect()
                }));
            }
            grads
        }),
    ))
}

/// Convolution with symmetric stride and padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_asym(input, kernel, bias, Conv2dGeom::symmetric(stride, padding))
}

/// Spatially separable convolution: a vertical [C_mid,C_in,k,1] pass
/// followed by a horizontal [C_out,C_mid,1,k] pass. Padding is split so
/// that the vertical pass pads rows only and the horizontal pass pads
/// columns only; stride likewise applies once per axis. The composite
/// therefore has the receptive field and output extent of one k x k
/// kernel with the same stride/padding.
pub fn separable_conv2d(
    input: &Tensor,
    w_row: &Tensor,
    w_col: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if w_row.rank() != 4 || w_col.rank() != 4 {
        return Err(Error::Shape(format!(
            "separable kernels must be rank-4, got {:?} and {:?}",
            w_row.shape(),
            w_col.shape()
        )));
    }
    if w_row.shape()[3] != 1 || w_col.shape()[2] != 1 {
        return Err(Error::Shape(format!(
            "separable kernels must be [C_mid,C_in,k,1] and [C_out,C_mid,1,k], got {:?} and {:?}",
            w_row.shape(),
            w_col.shape()
        )));
    }
    if w_col.shape()[1] != w_row.shape()[0] {
        return Err(Error::Config(format!(
            "separable channel chain mismatch: vertical pass emits {} channels but horizontal pass expects {}",
            w_row.shape()[0],
            w_col.shape()[1]
        )));
    }
    let vertical = conv2d_asym(
        input,
        w_row,
        None,
        Conv2dGeom {
            stride_h: stride,
            stride_w: 1,
            pad_h: padding,
            pad_w: 0,
        },
    )?;
    conv2d_asym(
        &vertical,
        w_col,
        bias,
        Conv2dGeom {
            stride_h: 1,
            stride_w: stride,
            pad_h: 0,
            pad_w: padding,
        },
    )
}

/// Transposed convolution of a [C_a,H,W] input with a [C_a,C_b,kh,kw]
/// kernel: the exact adjoint of `conv2d` with the same kernel and
/// geometry. Output extent is (len-1)*stride - 2*padding + k per axis.
pub fn conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv_transpose2d expects [C,H,W] input and rank-4 kernel, got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv_transpose2d stride must be >= 1".into()));
    }
    let (ca, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kca, cb, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if ca != kca {
        return Err(Error::Config(format!(
            "conv_transpose2d channel mismatch: input has {ca} channels (shape {:?}) but kernel expects {kca} (shape {:?})",
            input.shape(),
            kernel.shape()
        )));
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.numel() != cb {
            return Err(Error::Shape(format!(
                "conv_transpose2d bias must be [{cb}], got {:?}",
                b.shape()
            )));
        }
    }
    let out_extent = |len: usize, k: usize| -> Result<usize> {
        let v = (len - 1) * stride + k;
        if v < 2 * padding + 1 {
            return Err(Error::Config(format!(
                "conv_transpose2d output extent ({len}-1)*{stride} - 2*{padding} + {k} is not positive"
            )));
        }
        Ok(v - 2 * padding)
    };
    let ho = out_extent(h, kh)?;
    let wo = out_extent(w, kw)?;
    let geom = Conv2dGeom::symmetric(stride, padding);

    // G = K^T * X, scattered back through the conv geometry.
    let kk = cb * kh * kw;
    let mut g = vec![0.0; kk * h * w];
    gemm(
        true,
        false,
        kk,
        ca,
        h * w,
        1.0,
        kernel.values(),
        input.values(),
        0.0,
        &mut g,
    );
    let mut values = col2im(&g, cb, ho, wo, kh, kw, geom, h, w);
    if let Some(b) = bias {
        let bv = b.values();
        for c in 0..cb {
            for v in &mut values[c * ho * wo..(c + 1) * ho * wo] {
                *v += bv[c];
            }
        }
    }

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![cb, ho, wo],
        values,
        parents,
        Box::new(move |_out, parents, gy| {
            let input = &parents[0];
            let kernel = &parents[1];
            // dY is an image in conv-input position: correlate it.
            let col = im2col(gy, cb, ho, wo, kh, kw, geom, h, w);
            let d_input = input.requires_grad().then(|| {
                let mut dx = vec![0.0; ca * h * w];
                gemm(false, false, ca, kk, h * w, 1.0, kernel.values(), &col, 0.0, &mut dx);
                dx
            });
            let d_kernel = kernel.requires_grad().then(|| {
                let mut dk = vec![0.0; ca * kk];
                gemm(false, true, ca, h * w, kk, 1.0, input.values(), &col, 0.0, &mut dk);
                dk
            });
            let mut grads = vec![d_input, d_kernel];
            if parents.len() == 3 {
                grads.push(parents[2].requires_grad().then(|| {
                    (0..cb)
                        .map(|c| gy[c * ho * wo..(c + 1) * ho * wo].iter().sum())
                        .collect()
                }));
            }
            grads
        }),
    ))
}

/// Batch-norm mode: train normalizes by current statistics and updates the
/// running estimates; eval normalizes by the stored running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-channel statistics for batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over a [C,H,W] tensor, per channel across the
/// spatial pool. In train mode the running stats are seeded by the first
/// pass and momentum-updated afterwards.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut Option<BnStats>,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "batch_norm input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batch_norm gamma/beta must have {c} entries, got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let pool = h * w;
    let x = input.values();

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let slice = &x[ch * pool..(ch + 1) * pool];
                let m = slice.iter().sum::<f64>() / pool as f64;
                let v = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / pool as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            match running {
                Some(stats) => {
                    for ch in 0..c {
                        stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean[ch];
                        stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * var[ch];
                    }
                }
                None => {
                    *running = Some(BnStats {
                        mean: mean.clone(),
                        var: var.clone(),
                    });
                }
            }
            (mean, var)
        }
        BnMode::Eval => {
            let stats = running.as_ref().ok_or(Error::UninitializedStats)?;
            if stats.mean.len() != c {
                return Err(Error::Shape(format!(
                    "batch_norm running stats track {} channels, input has {c}",
                    stats.mean.len()
                )));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };

    let gv = gamma.values();
    let bv = beta.values();
    let mut values = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        inv_std[ch] = 1.0 / (var[ch] + eps).sqrt();
        let (g, b, m, is) = (gv[ch], bv[ch], mean[ch], inv_std[ch]);
        for i in 0..pool {
            values[ch * pool + i] = g * (x[ch * pool + i] - m) * is + b;
        }
    }

    let train = mode == BnMode::Train;
    Ok(Tensor::from_op(
        vec![c, h, w],
        values,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_out, parents, gy| {
            let x = parents[0].values();
            let gv = parents[1].values();
            let pool_f = pool as f64;
            // xhat recomputed from the saved statistics of this pass
            let xhat: Vec<f64> = (0..c * pool)
                .map(|i| (x[i] - mean[i / pool]) * inv_std[i / pool])
                .collect();
            let d_input = parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; c * pool];
                for ch in 0..c {
                    let s = ch * pool;
                    if train {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for i in 0..pool {
                            sum_dy += gy[s + i];
                            sum_dy_xhat += gy[s + i] * xhat[s + i];
                        }
                        let k = gv[ch] * inv_std[ch];
                        for i in 0..pool {
                            dx[s + i] = k
                                * (gy[s + i]
                                    - sum_dy / pool_f
                                    - xhat[s + i] * sum_dy_xhat / pool_f);
                        }
                    } else {
                        let k = gv[ch] * inv_std[ch];
                        for i in 0..pool {
                            dx[s + i] = k * gy[s + i];
                        }
                    }
                }
                dx
            });
            let d_gamma = parents[1].requires_grad().then(|| {
                (0..c)
                    .map(|ch| {
                        (0..pool)
                            .map(|i| gy[ch * pool + i] * xhat[ch * pool + i])
                            .sum()
                    })
                    .collect()
            });
            let d_beta = parents[2].requires_grad().then(|| {
                (0..c)
                    .map(|ch| gy[ch * pool..(ch + 1) * pool].iter().sum())
                    .collect()
            });
            vec![d_input, d_gamma, d_beta]
        }),
    ))
}

/// Non-overlapping average pooling by an integer factor.
pub fn avg_pool2d(input: &Tensor, factor: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "avg_pool2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "avg_pool2d factor {factor} does not divide extent {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let x = input.values();
    let norm = 1.0 / (factor * factor) as f64;
    let mut values = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        s += x[(ch * h + oi * factor + di) * w + oj * factor + dj];
                    }
                }
                values[(ch * ho + oi) * wo + oj] = s * norm;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        values,
        vec![input.clone()],
        Box::new(move |_out, parents, gy| {
            vec![parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let g = gy[(ch * ho + oi) * wo + oj] * norm;
                            for di in 0..factor {
                                for dj in 0..factor {
                                    dx[(ch * h + oi * factor + di) * w + oj * factor + dj] = g;
                                }
                            }
                        }
                    }
                }
                dx
            })]
        }),
    ))
}

/// Adaptive average pooling to a target extent: output cell (i, j)
/// averages the input window rows floor(i*H/out)..floor((i+1)*H/out) and
/// likewise for columns, matching the usual adaptive-pool convention.
pub fn adaptive_avg_pool2d(input: &Tensor, out_extent: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "adaptive_avg_pool2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if out_extent == 0 || out_extent > h || out_extent > w {
        return Err(Error::Config(format!(
            "adaptive pool extent {out_extent} invalid for {h}x{w} input"
        )));
    }
    let bound = move |i: usize, len: usize| (i * len) / out_extent;
    let x = input.values();
    let mut values = vec![0.0; c * out_extent * out_extent];
    for ch in 0..c {
        for oi in 0..out_extent {
            let (r0, r1) = (bound(oi, h), bound(oi + 1, h));
            for oj in 0..out_extent {
                let (c0, c1) = (bound(oj, w), bound(oj + 1, w));
                let mut s = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        s += x[(ch * h + i) * w + j];
                    }
                }
                values[(ch * out_extent + oi) * out_extent + oj] =
                    s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, out_extent, out_extent],
        values,
        vec![input.clone()],
        Box::new(move |_out, parents, gy| {
            vec![parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oi in 0..out_extent {
                        let (r0, r1) = (bound(oi, h), bound(oi + 1, h));
                        for oj in 0..out_extent {
                            let (c0, c1) = (bound(oj, w), bound(oj + 1, w));
                            let g = gy[(ch * out_extent + oi) * out_extent + oj]
                                / ((r1 - r0) * (c1 - c0)) as f64;
                            for i in r0..r1 {
                                for j in c0..c1 {
                                    dx[(ch * h + i) * w + j] += g;
                                }
                            }
                        }
                    }
                }
                dx
            })]
        }),
    ))
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!(
            "upsample_nearest input must be [C,H,W], got {:?}",
            input.shape()
        )));
    }
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let x = input.values();
    let mut values = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oi in 0..ho {
            let src_row = (ch * h + oi / factor) * w;
            let dst_row = (ch * ho + oi) * wo;
            for oj in 0..wo {
                values[dst_row + oj] = x[src_row + oj / factor];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![c, ho, wo],
        values,
        vec![input.clone()],
        Box::new(move |_out, parents, gy| {
            vec![parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oi in 0..ho {
                        let src_row = (ch * h + oi / factor) * w;
                        let dst_row = (ch * ho + oi) * wo;
                        for oj in 0..wo {
                            dx[src_row + oj / factor] += gy[dst_row + oj];
                        }
                    }
                }
                dx
            })]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop cross-correlation, the independent oracle.
    pub(crate) fn conv2d_oracle(
        x: &[f64],
        ci: usize,
        h: usize,
        w: usize,
        k: &[f64],
        co: usize,
        kh: usize,
        kw: usize,
        bias: Option<&[f64]>,
        geom: Conv2dGeom,
    ) -> (Vec<f64>, usize, usize) {
        let ho = (h + 2 * geom.pad_h - kh) / geom.stride_h + 1;
        let wo = (w + 2 * geom.pad_w - kw) / geom.stride_w + 1;
        let mut y = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for m in 0..kh {
                            for n in 0..kw {
                                let ii = (oi * geom.stride_h + m) as isize - geom.pad_h as isize;
                                let jj = (oj * geom.stride_w + n) as isize - geom.pad_w as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += x[(c * h + ii as usize) * w + jj as usize]
                                    * k[((o * ci + c) * kh + m) * kw + n];
                            }
                        }
                    }
                    y[(o * ho + oi) * wo + oj] = acc;
                }
            }
        }
        (y, ho, wo)
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "index {i}: got {g}, want {w}");
        }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn sum_kernel_collapses_window() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[10.0]);
    }

    #[test]
    fn conv2d_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1), (3, 2)] {
            let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let geom = Conv2dGeom::symmetric(stride, pad);
            let y = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let (want, ho, wo) =
                conv2d_oracle(x.values(), 2, 5, 5, k.values(), 3, 3, 3, Some(b.values()), geom);
            assert_eq!(y.shape(), &[3, ho, wo]);
            assert_close(y.values(), &want, 1e-6);
        }
    }

    #[test]
    fn conv2d_channel_mismatch_reports_both_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[3, 5, 3, 3]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &k, None, 1, 1).is_err());
    }

    #[test]
    fn separable_box_sum_column() {
        // Vertical ones filter + horizontal delta = 3-tap vertical box sum.
        let x = Tensor::new(&[1, 5, 3], (0..15).map(f64::from).collect()).unwrap();
        let a = Tensor::new(&[1, 1, 3, 1], vec![1.0; 3]).unwrap();
        let d = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = separable_conv2d(&x, &a, &d, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        let xv = x.values();
        for i in 0..3 {
            for j in 0..3 {
                let want = xv[i * 3 + j] + xv[(i + 1) * 3 + j] + xv[(i + 2) * 3 + j];
                assert!((y.values()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_equals_rank1_kernel_single_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (5, 1, 2), (2, 1, 0)] {
            let x = Tensor::randn(&[1, 6, 6], 1.0, &mut rng);
            let a = Tensor::randn(&[1, 1, k, 1], 1.0, &mut rng);
            let b = Tensor::randn(&[1, 1, 1, k], 1.0, &mut rng);
            // rank-1 kernel a * b
            let mut kv = vec![0.0; k * k];
            for m in 0..k {
                for n in 0..k {
                    kv[m * k + n] = a.values()[m] * b.values()[n];
                }
            }
            let full = Tensor::new(&[1, 1, k, k], kv).unwrap();
            let ys = separable_conv2d(&x, &a, &b, None, stride, pad).unwrap();
            let yf = conv2d(&x, &full, None, stride, pad).unwrap();
            assert_eq!(ys.shape(), yf.shape());
            assert_close(ys.values(), yf.values(), 1e-6);
        }
    }

    #[test]
    fn separable_chain_mismatch_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let a = Tensor::zeros(&[3, 2, 3, 1]);
        let b = Tensor::zeros(&[4, 5, 1, 3]);
        assert!(matches!(
            separable_conv2d(&x, &a, &b, None, 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separable_parameter_count_claim() {
        // k=3, C_in=C_mid=C_out=8: 2*(3*8*8) = 384 vs 3*3*8*8 = 576
        let w_row = Tensor::zeros(&[8, 8, 3, 1]);
        let w_col = Tensor::zeros(&[8, 8, 1, 3]);
        let full = Tensor::zeros(&[8, 8, 3, 3]);
        assert_eq!(w_row.numel() + w_col.numel(), 384);
        assert_eq!(full.numel(), 576);
        assert!(w_row.numel() + w_col.numel() < full.numel());
    }

    #[test]
    fn conv_transpose_broadcasts_single_cell() {
        let c = 2.5;
        let x = Tensor::new(&[1, 1, 1], vec![c]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_close(y.values(), &[c, 2.0 * c, 3.0 * c, 4.0 * c], 1e-12);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // Geometry-matched pairs: the conv input extent is derived from the
        // conv output extent so that no trailing pixels are dropped.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &(stride, pad, out) in &[(1usize, 0usize, 4usize), (1, 1, 4), (2, 1, 2), (2, 0, 3)] {
            let k_ext = 3;
            let h = (out - 1) * stride + k_ext - 2 * pad;
            let a = Tensor::randn(&[2, h, h], 1.0, &mut rng);
            let k = Tensor::randn(&[3, 2, k_ext, k_ext], 1.0, &mut rng);
            let fwd = conv2d(&a, &k, None, stride, pad).unwrap();
            assert_eq!(fwd.shape(), &[3, out, out]);
            let b = Tensor::randn(fwd.shape(), 1.0, &mut rng);
            let back = conv_transpose2d(&b, &k, None, stride, pad).unwrap();
            assert_eq!(back.shape(), a.shape());
            let lhs: f64 = fwd.values().iter().zip(b.values()).map(|(p, q)| p * q).sum();
            let rhs: f64 = a.values().iter().zip(back.values()).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() < 1e-6, "stride {stride} pad {pad}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_transpose_stride2_matches_zero_insertion_oracle() {
        // Zero-stuff the input (stride-1 gaps), pad by k-1, then correlate
        // with the flipped kernel: the classic equivalent formulation.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[1, 2, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 1, 2, 2], 1.0, &mut rng);
        let y = conv_transpose2d(&x, &k, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);

        // zero-stuffed grid: 3x3 with originals at even positions
        let mut stuffed = vec![0.0; 3 * 3];
        for i in 0..2 {
            for j in 0..2 {
                stuffed[(i * 2) * 3 + j * 2] = x.values()[i * 2 + j];
            }
        }
        // full correlation with flipped kernel == padding k-1 = 1
        let kf: Vec<f64> = k.values().iter().rev().cloned().collect();
        let stuffed_t = Tensor::new(&[1, 3, 3], stuffed).unwrap();
        let kf_t = Tensor::new(&[1, 1, 2, 2], kf).unwrap();
        let want = conv2d(&stuffed_t, &kf_t, None, 1, 1).unwrap();
        assert_eq!(want.shape(), y.shape());
        assert_close(y.values(), want.values(), 1e-9);
    }

    #[test]
    fn conv_transpose_negative_extent_rejected() {
        let x = Tensor::zeros(&[1, 1, 1]);
        let k = Tensor::zeros(&[1, 1, 1, 1]);
        // (1-1)*1 - 2*2 + 1 = -3
        assert!(matches!(
            conv_transpose2d(&x, &k, None, 1, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_norm_constant_input_is_beta() {
        let x = Tensor::full(&[2, 3, 3], 5.0);
        let gamma = Tensor::ones(&[2]);
        let beta = Tensor::zeros(&[2]);
        let mut running = None;
        let y = batch_norm(&x, &gamma, &beta, &mut running, BnMode::Train, 1e-5, 0.1).unwrap();
        assert!(y.values().iter().all(|v| v.abs() < 1e-9));
        assert!(running.is_some());
    }

    #[test]
    fn batch_norm_zero_gamma_is_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::new(&[2], vec![0.7, -0.3]).unwrap();
        let mut running = None;
        let y = batch_norm(&x, &gamma, &beta, &mut running, BnMode::Train, 1e-5, 0.1).unwrap();
        for (ch, chunk) in y.values().chunks(16).enumerate() {
            for v in chunk {
                assert!((v - beta.values()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_train_moments_match_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::randn(&[3, 8, 8], 2.0, &mut rng);
        let gamma = Tensor::new(&[3], vec![1.5, 0.5, 2.0]).unwrap();
        let beta = Tensor::new(&[3], vec![-1.0, 0.0, 3.0]).unwrap();
        let mut running = None;
        let y = batch_norm(&x, &gamma, &beta, &mut running, BnMode::Train, 1e-5, 0.1).unwrap();
        for ch in 0..3 {
            let slice = &y.values()[ch * 64..(ch + 1) * 64];
            let m = slice.iter().sum::<f64>() / 64.0;
            let sd = (slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 64.0).sqrt();
            assert!((m - beta.values()[ch]).abs() < 1e-4);
            assert!((sd - gamma.values()[ch]).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_eval_before_train_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let gamma = Tensor::ones(&[1]);
        let beta = Tensor::zeros(&[1]);
        let mut running = None;
        assert!(matches!(
            batch_norm(&x, &gamma, &beta, &mut running, BnMode::Eval, 1e-5, 0.1),
            Err(Error::UninitializedStats)
        ));
    }

    #[test]
    fn adaptive_pool_uneven_windows() {
        // 6 -> 4: window rows are [0..1], [1..3], [3..4], [4..6]
        let x = Tensor::new(&[1, 6, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = adaptive_avg_pool2d(&x, 1).unwrap();
        assert!((y.values()[0] - 2.5).abs() < 1e-12);
        let x6 = Tensor::new(&[1, 6, 6], (0..36).map(f64::from).collect()).unwrap();
        let y4 = adaptive_avg_pool2d(&x6, 4).unwrap();
        assert_eq!(y4.shape(), &[1, 4, 4]);
        // top-left output cell covers the single element (0,0)
        assert_eq!(y4.values()[0], 0.0);
        // bottom-right covers rows 4..6 x cols 4..6
        let want = (28.0 + 29.0 + 34.0 + 35.0) / 4.0;
        assert_eq!(y4.values()[15], want);
        // pool to the same extent is the identity
        let id = adaptive_avg_pool2d(&x6, 6).unwrap();
        assert_eq!(id.values(), x6.values());
    }

    #[test]
    fn avg_pool_then_upsample_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let p = avg_pool2d(&x, 2).unwrap();
        assert_eq!(p.shape(), &[2, 4, 4]);
        let u = upsample_nearest(&p, 2).unwrap();
        assert_eq!(u.shape(), &[2, 8, 8]);
        // constant image is a fixed point of pool + upsample
        let c = Tensor::full(&[1, 4, 4], 3.25);
        let r = upsample_nearest(&avg_pool2d(&c, 2).unwrap(), 2).unwrap();
        assert_eq!(r.values(), c.values());
    }
}
