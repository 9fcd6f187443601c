//! Tensor operation kernels.
//!
//! Convolution ships in two forms: `conv2d` (im2col + matrix product, the
//! fast path) and `conv2d_direct` (six nested loops, the reference path).
//! The two must agree to 1e-6; that agreement is itself a test. Both
//! accumulate in f64 with a fixed summation order.

use super::{BnParams, ConvParams, Shape, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Pointwise nonlinearity. LReLU slope is fixed at 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Lrelu,
}

pub const LRELU_SLOPE: f32 = 0.1;

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Lrelu => {
                if x > 0.0 {
                    x
                } else {
                    LRELU_SLOPE * x
                }
            }
        }
    }

    /// Derivative at x (subgradient 0 taken at the ReLU/LReLU kink).
    pub fn grad(self, x: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Lrelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LRELU_SLOPE
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Activation> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "lrelu" => Ok(Activation::Lrelu),
            other => Err(arg_err("activation", format!("unknown kind `{other}`"))),
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Treatment of out-of-bounds taps. Zeros everywhere in normal use; Wrap
/// makes full-stride translation equivariance exact for synthetic checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    Wrap,
}

/// Dot product with eight independent f64 accumulator chains. The combine
/// order is fixed, so results are bit-stable for a given slice length.
fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += pa[j] as f64 * pb[j] as f64;
        }
    }
    for (j, (&xa, &xb)) in ra.iter().zip(rb.iter()).enumerate() {
        acc[j] += xa as f64 * xb as f64;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// y += g * x over f64 accumulators, unrolled for vectorization.
fn axpy_f64(y: &mut [f64], g: f64, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    let mut cy = y.chunks_exact_mut(8);
    let mut cx = x.chunks_exact(8);
    for (py, px) in (&mut cy).zip(&mut cx) {
        for j in 0..8 {
            py[j] += g * px[j] as f64;
        }
    }
    for (yi, &xi) in cy.into_remainder().iter_mut().zip(cx.remainder().iter()) {
        *yi += g * xi as f64;
    }
}

fn conv_out_shape(x: Shape, p: &ConvParams) -> Result<(Shape, usize, usize)> {
    let ws = p.weight.shape();
    if x.c != ws.c {
        return Err(shape_err(
            "conv2d",
            format!("input with {} channels", ws.c),
            x,
        ));
    }
    let oh = Shape::conv_out(x.h, ws.h, p.stride, p.padding);
    let ow = Shape::conv_out(x.w, ws.w, p.stride, p.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok((Shape::new(x.n, ws.n, oh, ow), oh, ow)),
        _ => Err(shape_err(
            "conv2d",
            format!("input large enough for {}x{} stride {} pad {}", ws.h, ws.w, p.stride, p.padding),
            x,
        )),
    }
}

/// Gather one sample's padded receptive fields into rows of `col`,
/// laid out as [oh*ow rows][c_in*k*k values], inner order (ci, ky, kx).
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let ksz = c * k * k;
    debug_assert_eq!(col.len(), oh * ow * ksz);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * ksz..][..ksz];
            let mut idx = 0;
            for ci in 0..c {
                let xc = &x[ci * h * w..][..h * w];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let iy = match resolve_tap(iy, h, pad_mode) {
                        Some(iy) => iy,
                        None => {
                            for _ in 0..k {
                                row[idx] = 0.0;
                                idx += 1;
                            }
                            continue;
                        }
                    };
                    let xrow = &xc[iy * w..][..w];
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        row[idx] = match resolve_tap(ix, w, pad_mode) {
                            Some(ix) => xrow[ix],
                            None => 0.0,
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Map a possibly out-of-range tap index into the valid extent, or None for
/// a zero tap.
fn resolve_tap(i: isize, extent: usize, pad_mode: PadMode) -> Option<usize> {
    if i >= 0 && i < extent as isize {
        return Some(i as usize);
    }
    match pad_mode {
        PadMode::Zeros => None,
        PadMode::Wrap => Some(i.rem_euclid(extent as isize) as usize),
    }
}

// Output-pixel tile kept small enough that a tile of receptive-field rows
// stays cache-resident across the output-channel sweep.
const P_TILE: usize = 128;

/// im2col convolution (fast path).
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    x.check_finite("conv2d")?;
    p.weight.check_finite("conv2d")?;
    let (out_shape, oh, ow) = conv_out_shape(x.shape(), p)?;
    let xs = x.shape();
    let k = p.k();
    let ksz = xs.c * k * k;
    let np = oh * ow;
    let wdata = p.weight.data();
    let bias = p.bias.as_ref().map(Tensor::data);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut col = vec![0.0f32; np * ksz];
    for n in 0..xs.n {
        let xn = &x.data()[n * xs.c * xs.h * xs.w..][..xs.c * xs.h * xs.w];
        im2col(xn, xs.c, xs.h, xs.w, k, p.stride, p.padding, p.pad_mode, oh, ow, &mut col);
        let on = &mut out[n * out_shape.c * np..][..out_shape.c * np];
        let mut p0 = 0;
        while p0 < np {
            let p1 = (p0 + P_TILE).min(np);
            for co in 0..out_shape.c {
                let wrow = &wdata[co * ksz..][..ksz];
                let b = bias.map_or(0.0, |b| b[co]) as f64;
                let orow = &mut on[co * np..][..np];
                for pi in p0..p1 {
                    orow[pi] = (dot_f64(wrow, &col[pi * ksz..][..ksz]) + b) as f32;
                }
            }
            p0 = p1;
        }
    }
    Tensor::new(out_shape, out)
}

/// Reference convolution: six nested loops, no im2col. Slow, kept as the
/// independent oracle the fast path is checked against.
pub fn conv2d_direct(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    x.check_finite("conv2d_direct")?;
    p.weight.check_finite("conv2d_direct")?;
    let (out_shape, oh, ow) = conv_out_shape(x.shape(), p)?;
    let xs = x.shape();
    let k = p.k();
    let mut out = vec![0.0f32; out_shape.numel()];
    for n in 0..xs.n {
        for co in 0..out_shape.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                let (iy, ix) = match (
                                    resolve_tap(iy, xs.h, p.pad_mode),
                                    resolve_tap(ix, xs.w, p.pad_mode),
                                ) {
                                    (Some(iy), Some(ix)) => (iy, ix),
                                    _ => continue,
                                };
                                acc += x.at(n, ci, iy, ix) as f64
                                    * p.weight.at(co, ci, ky, kx) as f64;
                            }
                        }
                    }
                    if let Some(b) = &p.bias {
                        acc += b.data()[co] as f64;
                    }
                    out[((n * out_shape.c + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradients of a convolution given upstream dout.
/// Returns (dx, dweight, dbias); dbias is None when the conv has no bias.
///
/// Upstream gradients are frequently exact zeros (ReLU masks); both matrix
/// products skip those rows. Summation order is fixed, so gradients are
/// bit-deterministic.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let (out_shape, oh, ow) = conv_out_shape(x.shape(), p)?;
    assert_eq!(out_shape, dout.shape(), "conv2d_backward dout shape");
    let xs = x.shape();
    let k = p.k();
    let ksz = xs.c * k * k;
    let np = oh * ow;
    let cout = out_shape.c;
    let wdata = p.weight.data();

    let mut dw_acc = vec![0.0f64; cout * ksz];
    let mut db_acc = vec![0.0f64; cout];
    let mut dx = if need_dx {
        Some(vec![0.0f32; xs.numel()])
    } else {
        None
    };
    let mut col = vec![0.0f32; np * ksz];
    let mut dcol = vec![0.0f64; np * ksz];
    let chw = xs.c * xs.h * xs.w;

    for n in 0..xs.n {
        let xn = &x.data()[n * chw..][..chw];
        im2col(xn, xs.c, xs.h, xs.w, k, p.stride, p.padding, p.pad_mode, oh, ow, &mut col);
        let dn = &dout.data()[n * cout * np..][..cout * np];
        // weight and bias grads
        for co in 0..cout {
            let drow = &dn[co * np..][..np];
            let dwrow = &mut dw_acc[co * ksz..][..ksz];
            let mut bsum = 0.0f64;
            for (pi, &g) in drow.iter().enumerate() {
                let g = g as f64;
                bsum += g;
                if g != 0.0 {
                    axpy_f64(dwrow, g, &col[pi * ksz..][..ksz]);
                }
            }
            db_acc[co] += bsum;
        }
        // input grad via dcol then scatter
        if let Some(dx) = dx.as_mut() {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..cout {
                let drow = &dn[co * np..][..np];
                let wrow = &wdata[co * ksz..][..ksz];
                for (pi, &g) in drow.iter().enumerate() {
                    if g != 0.0 {
                        axpy_f64(&mut dcol[pi * ksz..][..ksz], g as f64, wrow);
                    }
                }
            }
            let dxn = &mut dx[n * chw..][..chw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &dcol[(oy * ow + ox) * ksz..][..ksz];
                    let mut idx = 0;
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if let (Some(iy), Some(ix)) = (
                                    resolve_tap(iy, xs.h, p.pad_mode),
                                    resolve_tap(ix, xs.w, p.pad_mode),
                                ) {
                                    dxn[(ci * xs.h + iy) * xs.w + ix] += row[idx] as f32;
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let dw = Tensor::new(
        p.weight.shape(),
        dw_acc.iter().map(|&v| v as f32).collect(),
    )?;
    let db = if p.bias.is_some() {
        Some(Tensor::new(
            Shape::new(1, cout, 1, 1),
            db_acc.iter().map(|&v| v as f32).collect(),
        )?)
    } else {
        None
    };
    let dx = match dx {
        Some(d) => Some(Tensor::new(xs, d)?),
        None => None,
    };
    Ok((dx, dw, db))
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn batchnorm_infer(x: &Tensor, p: &BnParams) -> Result<Tensor> {
    x.check_finite("batchnorm_infer")?;
    p.validate()?;
    let xs = x.shape();
    if xs.c != p.channels() {
        return Err(shape_err(
            "batchnorm_infer",
            format!("input with {} channels", p.channels()),
            xs,
        ));
    }
    let (scale, shift) = bn_scale_shift(p);
    let hw = xs.h * xs.w;
    let mut out = vec![0.0f32; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let (s, b) = (scale[c], shift[c]);
            let src = x.plane(n, c);
            let dst = &mut out[(n * xs.c + c) * hw..][..hw];
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = s * v + b;
            }
        }
    }
    Tensor::new(xs, out)
}

/// Per-channel affine coefficients of inference-mode batch norm.
pub(crate) fn bn_scale_shift(p: &BnParams) -> (Vec<f32>, Vec<f32>) {
    let c = p.channels();
    let gamma = p.gamma.data();
    let beta = p.beta.data();
    let mut scale = vec![0.0f32; c];
    let mut shift = vec![0.0f32; c];
    for i in 0..c {
        let inv_std = 1.0 / (p.running_var[i] as f64 + p.eps as f64).sqrt();
        scale[i] = (gamma[i] as f64 * inv_std) as f32;
        shift[i] = (beta[i] as f64 - gamma[i] as f64 * p.running_mean[i] as f64 * inv_std) as f32;
    }
    (scale, shift)
}

/// Gradients of batchnorm_infer: returns (dx, dgamma, dbeta).
pub(crate) fn batchnorm_backward(
    x: &Tensor,
    p: &BnParams,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xs = x.shape();
    let c = p.channels();
    let gamma = p.gamma.data();
    let hw = xs.h * xs.w;
    let mut dx = vec![0.0f32; xs.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for n in 0..xs.n {
        for ch in 0..c {
            let inv_std = 1.0 / (p.running_var[ch] as f64 + p.eps as f64).sqrt();
            let scale = (gamma[ch] as f64 * inv_std) as f32;
            let mean = p.running_mean[ch];
            let src = x.plane(n, ch);
            let g = &dout.data()[(n * c + ch) * hw..][..hw];
            let dst = &mut dx[(n * c + ch) * hw..][..hw];
            let mut dg = 0.0f64;
            let mut db = 0.0f64;
            for i in 0..hw {
                dst[i] = g[i] * scale;
                dg += g[i] as f64 * ((src[i] - mean) as f64 * inv_std);
                db += g[i] as f64;
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
    }
    Ok((
        Tensor::new(xs, dx)?,
        Tensor::new(Shape::new(1, c, 1, 1), dgamma.iter().map(|&v| v as f32).collect())?,
        Tensor::new(Shape::new(1, c, 1, 1), dbeta.iter().map(|&v| v as f32).collect())?,
    ))
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    x.check_finite("activation")?;
    let out = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::new(x.shape(), out)
}

pub(crate) fn activation_backward(x: &Tensor, kind: Activation, dout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dout.data().iter())
        .map(|(&v, &g)| kind.grad(v) * g)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Each input cell replicated into a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    x.check_finite("upsample_nearest2x")?;
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, 2 * xs.h, 2 * xs.w);
    let mut out = vec![0.0f32; os.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let dst = &mut out[(n * xs.c + c) * os.h * os.w..][..os.h * os.w];
            for y in 0..xs.h {
                for x_ in 0..xs.w {
                    let v = src[y * xs.w + x_];
                    let base = 2 * y * os.w + 2 * x_;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + os.w] = v;
                    dst[base + os.w + 1] = v;
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub(crate) fn upsample_backward(x_shape: Shape, dout: &Tensor) -> Tensor {
    let xs = x_shape;
    let os = dout.shape();
    let mut dx = vec![0.0f32; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = dout.plane(n, c);
            let dst = &mut dx[(n * xs.c + c) * xs.h * xs.w..][..xs.h * xs.w];
            for y in 0..xs.h {
                for x_ in 0..xs.w {
                    let base = 2 * y * os.w + 2 * x_;
                    dst[y * xs.w + x_] =
                        ((g[base] as f64 + g[base + 1] as f64)
                            + (g[base + os.w] as f64 + g[base + os.w + 1] as f64))
                            as f32;
                }
            }
        }
    }
    Tensor::new(xs, dx).expect("same shape")
}

/// Channel concatenation; all inputs must share n, h, w.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(arg_err("concat_channels", "empty input list"));
    }
    let first = xs[0].shape();
    let mut c_total = 0;
    for (i, t) in xs.iter().enumerate() {
        t.check_finite("concat_channels")?;
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(shape_err(
                "concat_channels",
                format!("input {i} with spatial dims of {first}"),
                s,
            ));
        }
        c_total += s.c;
    }
    let os = Shape::new(first.n, c_total, first.h, first.w);
    let hw = first.h * first.w;
    let mut out = vec![0.0f32; os.numel()];
    for n in 0..first.n {
        let mut c_off = 0;
        for t in xs {
            let tc = t.shape().c;
            let src = &t.data()[n * tc * hw..][..tc * hw];
            out[(n * c_total + c_off) * hw..][..tc * hw].copy_from_slice(src);
            c_off += tc;
        }
    }
    Tensor::new(os, out)
}

/// Inverse of concat: slice dout back into per-input gradients.
pub(crate) fn concat_backward(shapes: &[Shape], dout: &Tensor) -> Vec<Tensor> {
    let os = dout.shape();
    let hw = os.h * os.w;
    let mut grads = Vec::with_capacity(shapes.len());
    let mut c_off = 0;
    for s in shapes {
        let mut g = vec![0.0f32; s.numel()];
        for n in 0..os.n {
            let src = &dout.data()[(n * os.c + c_off) * hw..][..s.c * hw];
            g[n * s.c * hw..][..s.c * hw].copy_from_slice(src);
        }
        grads.push(Tensor::new(*s, g).expect("same shape"));
        c_off += s.c;
    }
    grads
}

/// Elementwise sum of two identically shaped tensors.
pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.check_finite("add")?;
    y.check_finite("add")?;
    if x.shape() != y.shape() {
        return Err(shape_err("add", x.shape(), y.shape()));
    }
    let out = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(x.shape(), out)
}

/// Symmetric signed INT8 fake quantization of a slice:
/// y = clamp(round_half_away(x / scale), -127, 127) * scale.
pub fn fake_quantize_slice(xs: &[f32], scale: f32, out: &mut [f32]) {
    for (o, &x) in out.iter_mut().zip(xs.iter()) {
        // f32::round is round-half-away-from-zero, which makes
        // fq(-x) == -fq(x) exact.
        let q = (x / scale).round().clamp(-127.0, 127.0);
        *o = q * scale;
    }
}

/// Straight-through gradient mask: 1 inside the representable range.
pub(crate) fn fake_quantize_ste_mask(x: f32, scale: f32) -> f32 {
    if (x / scale).abs() <= 127.0 {
        1.0
    } else {
        0.0
    }
}
