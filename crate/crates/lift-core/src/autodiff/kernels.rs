//! Raw numeric loops behind the graph ops. The graph wraps these for
//! training; inference calls them directly on plain buffers.

use crate::error::{Error, Result};

/// Output length of a valid strided convolution along one axis.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv", "stride 0".to_string()));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv",
            format!("kernel {k} larger than padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn tconv_out(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let grown = (n - 1) * stride + k;
    if grown < 2 * pad {
        return Err(Error::shape(
            "tconv",
            format!("padding {pad} swallows output of extent {grown}"),
        ));
    }
    Ok(grown - 2 * pad)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Vec<f64>> {
    let ho = conv_out(h, kh, stride, pad)?;
    let wo = conv_out(w, kw, stride, pad)?;
    let mut y = vec![0.0; co * ho * wo];
    for oc in 0..co {
        let base = match bias {
            Some(b) => b[oc],
            None => 0.0,
        };
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = base;
                for ic in 0..ci {
                    for ki in 0..kh {
                        let ih = (oh * stride + ki).wrapping_sub(pad);
                        if ih >= h {
                            continue;
                        }
                        let xrow = (ic * h + ih) * w;
                        let wrow = ((oc * ci + ic) * kh + ki) * kw;
                        for kj in 0..kw {
                            let iw = (ow * stride + kj).wrapping_sub(pad);
                            if iw < w {
                                acc += x[xrow + iw] * wt[wrow + kj];
                            }
                        }
                    }
                }
                y[(oc * ho + oh) * wo + ow] = acc;
            }
        }
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gy: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) -> Result<()> {
    let ho = conv_out(h, kh, stride, pad)?;
    let wo = conv_out(w, kw, stride, pad)?;
    if let Some(gb) = gb {
        for oc in 0..co {
            let mut acc = 0.0;
            for i in 0..ho * wo {
                acc += gy[oc * ho * wo + i];
            }
            gb[oc] += acc;
        }
    }
    let want_x = gx.is_some();
    let want_w = gw.is_some();
    if !want_x && !want_w {
        return Ok(());
    }
    let mut gx_buf = gx;
    let mut gw_buf = gw;
    for oc in 0..co {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = gy[(oc * ho + oh) * wo + ow];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..ci {
                    for ki in 0..kh {
                        let ih = (oh * stride + ki).wrapping_sub(pad);
                        if ih >= h {
                            continue;
                        }
                        let xrow = (ic * h + ih) * w;
                        let wrow = ((oc * ci + ic) * kh + ki) * kw;
                        for kj in 0..kw {
                            let iw = (ow * stride + kj).wrapping_sub(pad);
                            if iw >= w {
                                continue;
                            }
                            if let Some(gx) = gx_buf.as_deref_mut() {
                                gx[xrow + iw] += g * wt[wrow + kj];
                            }
                            if let Some(gw) = gw_buf.as_deref_mut() {
                                gw[wrow + kj] += g * x[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Transposed convolution; weights are laid out [ci, co, kh, kw].
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_fwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Vec<f64>> {
    let ho = tconv_out(h, kh, stride, pad)?;
    let wo = tconv_out(w, kw, stride, pad)?;
    let mut y = vec![0.0; co * ho * wo];
    if let Some(b) = bias {
        for oc in 0..co {
            for i in 0..ho * wo {
                y[oc * ho * wo + i] = b[oc];
            }
        }
    }
    for ic in 0..ci {
        for ih in 0..h {
            for iw in 0..w {
                let v = x[(ic * h + ih) * w + iw];
                if v == 0.0 {
                    continue;
                }
                for oc in 0..co {
                    let wbase = ((ic * co + oc) * kh) * kw;
                    for ki in 0..kh {
                        let oh = (ih * stride + ki).wrapping_sub(pad);
                        if oh >= ho {
                            continue;
                        }
                        let yrow = (oc * ho + oh) * wo;
                        for kj in 0..kw {
                            let ow = (iw * stride + kj).wrapping_sub(pad);
                            if ow < wo {
                                y[yrow + ow] += v * wt[wbase + ki * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
pub fn tconv2d_bwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gy: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) -> Result<()> {
    let ho = tconv_out(h, kh, stride, pad)?;
    let wo = tconv_out(w, kw, stride, pad)?;
    if let Some(gb) = gb {
        for oc in 0..co {
            let mut acc = 0.0;
            for i in 0..ho * wo {
                acc += gy[oc * ho * wo + i];
            }
            gb[oc] += acc;
        }
    }
    let mut gx_buf = gx;
    let mut gw_buf = gw;
    if gx_buf.is_none() && gw_buf.is_none() {
        return Ok(());
    }
    for ic in 0..ci {
        for ih in 0..h {
            for iw in 0..w {
                let xv = x[(ic * h + ih) * w + iw];
                let mut gacc = 0.0;
                for oc in 0..co {
                    let wbase = ((ic * co + oc) * kh) * kw;
                    for ki in 0..kh {
                        let oh = (ih * stride + ki).wrapping_sub(pad);
                        if oh >= ho {
                            continue;
                        }
                        let yrow = (oc * ho + oh) * wo;
                        for kj in 0..kw {
                            let ow = (iw * stride + kj).wrapping_sub(pad);
                            if ow >= wo {
                                continue;
                            }
                            let g = gy[yrow + ow];
                            gacc += g * wt[wbase + ki * kw + kj];
                            if let Some(gw) = gw_buf.as_deref_mut() {
                                gw[wbase + ki * kw + kj] += g * xv;
                            }
                        }
                    }
                }
                if let Some(gx) = gx_buf.as_deref_mut() {
                    gx[(ic * h + ih) * w + iw] += gacc;
                }
            }
        }
    }
    Ok(())
}

/// 2x2 stride-2 average pooling, floor semantics on odd extents.
pub fn avgpool2d_half_fwd(x: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape("avgpool2d", format!("map {h}x{w} too small")));
    }
    let mut y = vec![0.0; c * ho * wo];
    for ic in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let r0 = (ic * h + 2 * oh) * w + 2 * ow;
                let r1 = r0 + w;
                y[(ic * ho + oh) * wo + ow] = 0.25 * (x[r0] + x[r0 + 1] + x[r1] + x[r1 + 1]);
            }
        }
    }
    Ok(y)
}

pub fn avgpool2d_half_bwd(gy: &[f64], c: usize, h: usize, w: usize, gx: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ic in 0..c {
        for oh in 0..ho {
            for ow in 0..wo {
                let g = 0.25 * gy[(ic * ho + oh) * wo + ow];
                let r0 = (ic * h + 2 * oh) * w + 2 * ow;
                let r1 = r0 + w;
                gx[r0] += g;
                gx[r0 + 1] += g;
                gx[r1] += g;
                gx[r1 + 1] += g;
            }
        }
    }
}

/// Channelwise spatial mean of a [C,H,W] map.
pub fn gap2d(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let area = (h * w) as f64;
    let mut y = vec![0.0; c];
    for ic in 0..c {
        let mut acc = 0.0;
        for i in 0..h * w {
            acc += x[ic * h * w + i];
        }
        y[ic] = acc / area;
    }
    y
}

/// Valid-mode correlation with a symmetric tap vector along one spatial
/// axis of a [C,H,W,D] block. `axis` is 1 (H), 2 (W), or 3 (D).
pub fn blur_axis_valid(
    x: &[f64],
    dims: [usize; 4],
    axis: usize,
    taps: &[f64],
) -> Result<(Vec<f64>, [usize; 4])> {
    let k = taps.len();
    let n = dims[axis];
    if n < k {
        return Err(Error::shape(
            "blur",
            format!("axis {axis} extent {n} shorter than kernel {k}"),
        ));
    }
    let mut od = dims;
    od[axis] = n - k + 1;
    let mut y = vec![0.0; od.iter().product()];
    let (sy, sx) = (strides(od), strides(dims));
    for c in 0..od[0] {
        for h in 0..od[1] {
            for w in 0..od[2] {
                for d in 0..od[3] {
                    let mut idx = [c, h, w, d];
                    let yo = c * sy[0] + h * sy[1] + w * sy[2] + d * sy[3];
                    let mut acc = 0.0;
                    for (t, tap) in taps.iter().enumerate() {
                        idx[axis] = [c, h, w, d][axis] + t;
                        acc += tap
                            * x[idx[0] * sx[0] + idx[1] * sx[1] + idx[2] * sx[2] + idx[3] * sx[3]];
                    }
                    y[yo] = acc;
                }
            }
        }
    }
    Ok((y, od))
}

pub fn blur_axis_valid_bwd(
    gy: &[f64],
    in_dims: [usize; 4],
    axis: usize,
    taps: &[f64],
    gx: &mut [f64],
) {
    let k = taps.len();
    let mut od = in_dims;
    od[axis] = in_dims[axis] - k + 1;
    let (sy, sx) = (strides(od), strides(in_dims));
    for c in 0..od[0] {
        for h in 0..od[1] {
            for w in 0..od[2] {
                for d in 0..od[3] {
                    let g = gy[c * sy[0] + h * sy[1] + w * sy[2] + d * sy[3]];
                    if g == 0.0 {
                        continue;
                    }
                    let mut idx = [c, h, w, d];
                    for (t, tap) in taps.iter().enumerate() {
                        idx[axis] = [c, h, w, d][axis] + t;
                        gx[idx[0] * sx[0] + idx[1] * sx[1] + idx[2] * sx[2] + idx[3] * sx[3]] +=
                            g * tap;
                    }
                }
            }
        }
    }
}

pub fn strides(dims: [usize; 4]) -> [usize; 4] {
    [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
}

/// Separable valid-mode 3-D blur over the spatial axes of [C,H,W,D].
pub fn blur3d_valid(x: &[f64], dims: [usize; 4], taps: &[f64]) -> Result<(Vec<f64>, [usize; 4])> {
    let (a, da) = blur_axis_valid(x, dims, 1, taps)?;
    let (b, db) = blur_axis_valid(&a, da, 2, taps)?;
    blur_axis_valid(&b, db, 3, taps)
}

/// 2x2x2 stride-2 average pooling over [C,H,W,D], floor semantics.
pub fn avgpool3d_half_fwd(x: &[f64], dims: [usize; 4]) -> Result<(Vec<f64>, [usize; 4])> {
    let od = [dims[0], dims[1] / 2, dims[2] / 2, dims[3] / 2];
    if od[1] == 0 || od[2] == 0 || od[3] == 0 {
        return Err(Error::shape(
            "avgpool3d",
            format!("block {dims:?} too small to halve"),
        ));
    }
    let (sy, sx) = (strides(od), strides(dims));
    let mut y = vec![0.0; od.iter().product()];
    for c in 0..od[0] {
        for h in 0..od[1] {
            for w in 0..od[2] {
                for d in 0..od[3] {
                    let mut acc = 0.0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            for dd in 0..2 {
                                acc += x[c * sx[0]
                                    + (2 * h + dh) * sx[1]
                                    + (2 * w + dw) * sx[2]
                                    + (2 * d + dd) * sx[3]];
                            }
                        }
                    }
                    y[c * sy[0] + h * sy[1] + w * sy[2] + d * sy[3]] = acc / 8.0;
                }
            }
        }
    }
    Ok((y, od))
}

pub fn avgpool3d_half_bwd(gy: &[f64], in_dims: [usize; 4], gx: &mut [f64]) {
    let od = [in_dims[0], in_dims[1] / 2, in_dims[2] / 2, in_dims[3] / 2];
    let (sy, sx) = (strides(od), strides(in_dims));
    for c in 0..od[0] {
        for h in 0..od[1] {
            for w in 0..od[2] {
                for d in 0..od[3] {
                    let g = gy[c * sy[0] + h * sy[1] + w * sy[2] + d * sy[3]] / 8.0;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            for dd in 0..2 {
                                gx[c * sx[0]
                                    + (2 * h + dh) * sx[1]
                                    + (2 * w + dw) * sx[2]
                                    + (2 * d + dd) * sx[3]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
