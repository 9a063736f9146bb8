//! Network primitives on top of the autodiff tensor: 2-D convolution,
//! first/second-order pooling, covariance matrices, row-wise convolution,
//! sub-pixel shuffle and nearest-neighbor upsampling.
//!
//! Feature maps are laid out `(C, H, W)` row-major throughout.

use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Weights and bias of one convolution layer. Stride is always 1.
#[derive(Clone)]
pub struct ConvParams<S: Scalar> {
    pub weight: Tensor<S>, // (C_out, C_in, k_h, k_w)
    pub bias: Tensor<S>,   // (C_out)
    pub padding: usize,
}

/// 2-D cross-correlation with symmetric zero padding, stride 1.
///
/// `x` is `(C_in, H, W)`, `weight` is `(C_out, C_in, k_h, k_w)`,
/// `bias` is `(C_out)`. Output is `(C_out, H + 2p - k_h + 1, W + 2p - k_w + 1)`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    padding: usize,
) -> Result<Tensor<S>> {
    if x.shape().len() != 3 || weight.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects (C,H,W) input and (Co,Ci,kh,kw) weight, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias shape {:?} vs C_out {cout}",
            bias.shape()
        )));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;

    // Valid output range for a given kernel offset: iy = oy + ky - p in [0, h).
    let ranges = move |k: usize, n: usize, on: usize| -> (usize, usize) {
        let lo = padding.saturating_sub(k);
        let hi = (n + padding - k).min(on);
        (lo, hi.max(lo))
    };

    let mut out = vec![S::zero(); cout * oh * ow];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        for co in 0..cout {
            let obase = co * oh * ow;
            let bv = bd[co];
            for v in &mut out[obase..obase + oh * ow] {
                *v = bv;
            }
            for ci in 0..cin {
                let xbase = ci * h * w;
                for ky in 0..kh {
                    let (oy0, oy1) = ranges(ky, h, oh);
                    for kx in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox0, ox1) = ranges(kx, w, ow);
                        for oy in oy0..oy1 {
                            let iy = oy + ky - padding;
                            let xrow = xbase + iy * w + kx;
                            let orow = obase + oy * ow;
                            for ox in ox0..ox1 {
                                out[orow + ox] = out[orow + ox] + wv * xd[xrow + ox - padding];
                            }
                        }
                    }
                }
            }
        }
    }

    let back = Box::new(move |g: &[S], parents: &[Tensor<S>]| {
        let (x, weight, bias) = (&parents[0], &parents[1], &parents[2]);
        if bias.requires_grad() {
            bias.accum(|gb| {
                for co in 0..cout {
                    let mut acc = S::zero();
                    for v in &g[co * oh * ow..(co + 1) * oh * ow] {
                        acc = acc + *v;
                    }
                    gb[co] = gb[co] + acc;
                }
            });
        }
        if weight.requires_grad() {
            let xd = x.data();
            weight.accum(|gw| {
                for co in 0..cout {
                    let obase = co * oh * ow;
                    for ci in 0..cin {
                        let xbase = ci * h * w;
                        for ky in 0..kh {
                            let (oy0, oy1) = ranges(ky, h, oh);
                            for kx in 0..kw {
                                let (ox0, ox1) = ranges(kx, w, ow);
                                let mut acc = S::zero();
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - padding;
                                    let xrow = xbase + iy * w + kx;
                                    let orow = obase + oy * ow;
                                    for ox in ox0..ox1 {
                                        acc = acc + g[orow + ox] * xd[xrow + ox - padding];
                                    }
                                }
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                gw[wi] = gw[wi] + acc;
                            }
                        }
                    }
                }
            });
        }
        if x.requires_grad() {
            let wd = weight.data();
            x.accum(|gx| {
                for co in 0..cout {
                    let obase = co * oh * ow;
                    for ci in 0..cin {
                        let xbase = ci * h * w;
                        for ky in 0..kh {
                            let (oy0, oy1) = ranges(ky, h, oh);
                            for kx in 0..kw {
                                let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                                let (ox0, ox1) = ranges(kx, w, ow);
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - padding;
                                    let xrow = xbase + iy * w + kx;
                                    let orow = obase + oy * ow;
                                    for ox in ox0..ox1 {
                                        gx[xrow + ox - padding] = gx[xrow + ox - padding] + wv * g[orow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    });

    Ok(tensor_op(
        vec![cout, oh, ow],
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        back,
    ))
}

// Ops in this module that need a custom vector-Jacobian rule go through
// this shim so Tensor's constructor stays private to the tensor module.
fn tensor_op<S: Scalar>(
    shape: Vec<usize>,
    data: Vec<S>,
    parents: Vec<Tensor<S>>,
    back: Box<dyn Fn(&[S], &[Tensor<S>])>,
) -> Tensor<S> {
    Tensor::custom_op(shape, data, parents, back)
}

fn rank3<S: Scalar>(x: &Tensor<S>, what: &str) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects (C,H,W), got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Mean over all spatial positions, per channel: `(C,H,W) -> (C,1,1)`.
pub fn channel_avg_pool_spatial<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "channel_avg_pool_spatial")?;
    let hw = h * w;
    let flat = x.reshape(&[c, hw])?;
    let ones = Tensor::full(&[hw, 1], S::one() / S::from_f64(hw as f64));
    flat.matmul(&ones)?.reshape(&[c, 1, 1])
}

/// Mean over channels, per spatial position: `(C,H,W) -> (1,H,W)`.
pub fn spatial_avg_pool_channel<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "spatial_avg_pool_channel")?;
    let flat = x.reshape(&[c, h * w])?;
    let ones = Tensor::full(&[1, c], S::one() / S::from_f64(c as f64));
    ones.matmul(&flat)?.reshape(&[1, h, w])
}

/// Channel covariance: center each channel over its spatial positions and
/// form `(1/(H*W)) X X^T`, giving a symmetric PSD `(C,C)` matrix.
pub fn channel_covariance<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "channel_covariance")?;
    let hw = h * w;
    if hw < 2 {
        return Err(Error::DegenerateInput(format!(
            "channel covariance needs H*W >= 2, got {h}x{w}"
        )));
    }
    let flat = x.reshape(&[c, hw])?;
    let ones = Tensor::full(&[hw, 1], S::one() / S::from_f64(hw as f64));
    let row_mean = flat.matmul(&ones)?; // (C,1)
    let centered = flat.sub(&row_mean)?;
    let sigma = centered.matmul(&centered.permute(&[1, 0])?)?;
    Ok(sigma.scale(S::one() / S::from_f64(hw as f64)))
}

/// Spatial covariance over pooled positions: center each position over
/// channels and form `(1/C) X^T X`, giving `(H*W, H*W)`.
pub fn spatial_covariance<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "spatial_covariance")?;
    if c < 2 {
        return Err(Error::DegenerateInput(format!(
            "spatial covariance needs C >= 2, got {c}"
        )));
    }
    let hw = h * w;
    let flat = x.reshape(&[c, hw])?;
    let ones = Tensor::full(&[1, c], S::one() / S::from_f64(c as f64));
    let col_mean = ones.matmul(&flat)?; // (1,HW)
    let centered = flat.sub(&col_mean)?;
    let sigma = centered.permute(&[1, 0])?.matmul(&centered)?;
    Ok(sigma.scale(S::one() / S::from_f64(c as f64)))
}

/// One shared `1xK` filter applied to every row of a `KxK` matrix:
/// `out[i] = sum_j w[j] * sigma[i,j] + b`.
pub fn rowwise_conv<S: Scalar>(
    sigma: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if sigma.shape().len() != 2 || sigma.shape()[0] != sigma.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "rowwise_conv expects a square matrix, got {:?}",
            sigma.shape()
        )));
    }
    let k = sigma.shape()[0];
    if weight.shape() != [1, k] {
        return Err(Error::ShapeMismatch(format!(
            "rowwise_conv weight must be (1,{k}), got {:?}",
            weight.shape()
        )));
    }
    if bias.numel() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "rowwise_conv bias must be a scalar, got {:?}",
            bias.shape()
        )));
    }
    let prod = sigma.matmul(&weight.permute(&[1, 0])?)?.reshape(&[k])?;
    prod.add(bias)
}

/// Adaptive average pooling: output cell `(i,j)` averages the input window
/// rows `[floor(i*H/oh), ceil((i+1)*H/oh))` and analogous columns.
pub fn adaptive_avg_pool<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "adaptive_avg_pool")?;
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::ShapeMismatch(format!(
            "adaptive_avg_pool target {oh}x{ow} incompatible with input {h}x{w}"
        )));
    }
    let row_win = move |i: usize| -> (usize, usize) { (i * h / oh, ((i + 1) * h + oh - 1) / oh) };
    let col_win = move |j: usize| -> (usize, usize) { (j * w / ow, ((j + 1) * w + ow - 1) / ow) };

    let mut out = vec![S::zero(); c * oh * ow];
    {
        let xd = x.data();
        for ch in 0..c {
            for i in 0..oh {
                let (y0, y1) = row_win(i);
                for j in 0..ow {
                    let (x0, x1) = col_win(j);
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + xd[ch * h * w + y * w + xx];
                        }
                    }
                    let count = S::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                    out[ch * oh * ow + i * ow + j] = acc / count;
                }
            }
        }
    }
    let back = Box::new(move |g: &[S], parents: &[Tensor<S>]| {
        parents[0].accum(|gx| {
            for ch in 0..c {
                for i in 0..oh {
                    let (y0, y1) = row_win(i);
                    for j in 0..ow {
                        let (x0, x1) = col_win(j);
                        let count = S::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        let gv = g[ch * oh * ow + i * ow + j] / count;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let xi = ch * h * w + y * w + xx;
                                gx[xi] = gx[xi] + gv;
                            }
                        }
                    }
                }
            }
        });
    });
    Ok(tensor_op(vec![c, oh, ow], out, vec![x.clone()], back))
}

/// Sub-pixel shuffle: `(r^2 C, H, W) -> (C, rH, rW)` with
/// `out[c, r*h+i, r*w+j] = x[c*r^2 + i*r + j, h, w]`.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (ct, h, w) = rank3(x, "pixel_shuffle")?;
    if r == 0 || ct % (r * r) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pixel_shuffle needs channel count divisible by r^2 ({}), got {ct}",
            r * r
        )));
    }
    let c = ct / (r * r);
    x.reshape(&[c, r, r, h, w])?
        .permute(&[0, 3, 1, 4, 2])?
        .reshape(&[c, r * h, r * w])
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (c, rh, rw) = rank3(x, "pixel_unshuffle")?;
    if r == 0 || rh % r != 0 || rw % r != 0 {
        return Err(Error::ShapeMismatch(format!(
            "pixel_unshuffle needs extents divisible by r={r}, got {rh}x{rw}"
        )));
    }
    let (h, w) = (rh / r, rw / r);
    x.reshape(&[c, h, r, w, r])?
        .permute(&[0, 2, 4, 1, 3])?
        .reshape(&[c * r * r, h, w])
}

/// Nearest-neighbor upsampling with floor index mapping:
/// `out[i,j] = x[i*H/oh, j*W/ow]`. Gradient accumulates into source cells.
pub fn nearest_upsample<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Result<Tensor<S>> {
    let (c, h, w) = rank3(x, "nearest_upsample")?;
    if oh < h || ow < w {
        return Err(Error::ShapeMismatch(format!(
            "nearest_upsample target {oh}x{ow} smaller than input {h}x{w}"
        )));
    }
    let src_y: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
    let src_x: Vec<usize> = (0..ow).map(|j| j * w / ow).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    {
        let xd = x.data();
        for ch in 0..c {
            let base = ch * h * w;
            for &sy in &src_y {
                let row = base + sy * w;
                for &sx in &src_x {
                    out.push(xd[row + sx]);
                }
            }
        }
    }
    let sy = src_y.clone();
    let sx = src_x.clone();
    let back = Box::new(move |g: &[S], parents: &[Tensor<S>]| {
        parents[0].accum(|gx| {
            let mut gi = 0usize;
            for ch in 0..c {
                let base = ch * h * w;
                for &y in &sy {
                    let row = base + y * w;
                    for &x in &sx {
                        gx[row + x] = gx[row + x] + g[gi];
                        gi += 1;
                    }
                }
            }
        });
    });
    Ok(tensor_op(vec![c, oh, ow], out, vec![x.clone()], back))
}
