//! Forward and backward kernels on plain tensors.
//!
//! Every differentiable op on the tape delegates to a pair of functions here. The no-grad
//! paths (masks, metrics, teacher signals) call the forward kernels directly.

use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Abs,
    Exp,
    Log,
    /// Square root with zero derivative at the origin.
    Sqrt,
    Square,
    Elu,
    Relu,
    Sigmoid,
    AddScalar(f64),
    MulScalar(f64),
    /// `min(x, c)`.
    MinScalar(f64),
    /// `max(x, c)`.
    MaxScalar(f64),
    Clamp(f64, f64),
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let a_numel: usize = a.iter().product();
    let b_numel: usize = b.iter().product();
    if b_numel == 1 {
        return Ok(a.to_vec());
    }
    if a_numel == 1 {
        return Ok(b.to_vec());
    }
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes). `shape` is either
/// single-element or the same rank as `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    if shape.iter().product::<usize>() == 1 {
        return vec![0; out.len()];
    }
    let own = contiguous_strides(shape);
    shape
        .iter()
        .zip(own)
        .map(|(&d, s)| if d == 1 { 0 } else { s })
        .collect()
}

/// Flat source offsets for every output element of a broadcast.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let numel: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

#[inline]
fn apply_binary<T: Scalar>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

pub(crate) fn binary<T: Scalar>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape("elementwise", &a.shape, &b.shape)?;
    if a.shape == b.shape {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| apply_binary(kind, x, y))
            .collect();
        return Ok(Tensor { shape: out_shape, data });
    }
    if b.numel() == 1 && out_shape == a.shape {
        let y = b.data[0];
        let data = a.data.iter().map(|&x| apply_binary(kind, x, y)).collect();
        return Ok(Tensor { shape: out_shape, data });
    }
    if a.numel() == 1 && out_shape == b.shape {
        let x = a.data[0];
        let data = b.data.iter().map(|&y| apply_binary(kind, x, y)).collect();
        return Ok(Tensor { shape: out_shape, data });
    }
    let oa = broadcast_offsets(&a.shape, &out_shape);
    let ob = broadcast_offsets(&b.shape, &out_shape);
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| apply_binary(kind, a.data[i], b.data[j]))
        .collect();
    Ok(Tensor { shape: out_shape, data })
}

/// Sums a gradient of the broadcast output shape back onto `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad;
    }
    let mut out = Tensor::zeros(shape.to_vec());
    if out.numel() == 1 {
        out.data[0] = grad.sum();
        return out;
    }
    let offsets = broadcast_offsets(shape, &grad.shape);
    for (&o, &g) in offsets.iter().zip(&grad.data) {
        out.data[o] += g;
    }
    out
}

/// Gradients of a broadcast binary op with respect to each operand.
pub(crate) fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let expand = |t: &Tensor<T>| -> Tensor<T> {
        if t.shape == gy.shape {
            t.clone()
        } else {
            binary(BinaryKind::Add, &Tensor::zeros(gy.shape.clone()), t).unwrap()
        }
    };
    let ga = need_a.then(|| {
        let g = match kind {
            BinaryKind::Add | BinaryKind::Sub => gy.clone(),
            BinaryKind::Mul => binary(BinaryKind::Mul, gy, &expand(b)).unwrap(),
            BinaryKind::Div => binary(BinaryKind::Div, gy, &expand(b)).unwrap(),
        };
        reduce_to_shape(g, &a.shape)
    });
    let gb = need_b.then(|| {
        let g = match kind {
            BinaryKind::Add => gy.clone(),
            BinaryKind::Sub => gy.map(|v| -v),
            BinaryKind::Mul => binary(BinaryKind::Mul, gy, &expand(a)).unwrap(),
            BinaryKind::Div => {
                let ea = expand(a);
                let eb = expand(b);
                let data = gy
                    .data
                    .iter()
                    .zip(&ea.data)
                    .zip(&eb.data)
                    .map(|((&g, &x), &y)| -g * x / (y * y))
                    .collect();
                Tensor { shape: gy.shape.clone(), data }
            }
        };
        reduce_to_shape(g, &b.shape)
    });
    (ga, gb)
}

#[inline]
fn apply_unary<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp_m1()
            }
        }
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        UnaryKind::AddScalar(c) => x + T::lit(c),
        UnaryKind::MulScalar(c) => x * T::lit(c),
        UnaryKind::MinScalar(c) => x.min(T::lit(c)),
        UnaryKind::MaxScalar(c) => x.max(T::lit(c)),
        UnaryKind::Clamp(lo, hi) => x.max(T::lit(lo)).min(T::lit(hi)),
    }
}

pub(crate) fn unary<T: Scalar>(kind: UnaryKind, a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| apply_unary(kind, x))
}

/// Derivative of the unary op given input `x` and output `y`.
#[inline]
fn unary_derivative<T: Scalar>(kind: UnaryKind, x: T, y: T) -> T {
    let zero = T::zero();
    let one = T::one();
    match kind {
        UnaryKind::Neg => -one,
        UnaryKind::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => one / x,
        UnaryKind::Sqrt => {
            if y > zero {
                T::lit(0.5) / y
            } else {
                zero
            }
        }
        UnaryKind::Square => x + x,
        UnaryKind::Elu => {
            if x > zero {
                one
            } else {
                y + one
            }
        }
        UnaryKind::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::AddScalar(_) => one,
        UnaryKind::MulScalar(c) => T::lit(c),
        UnaryKind::MinScalar(c) => {
            if x < T::lit(c) {
                one
            } else {
                zero
            }
        }
        UnaryKind::MaxScalar(c) => {
            if x > T::lit(c) {
                one
            } else {
                zero
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x > T::lit(lo) && x < T::lit(hi) {
                one
            } else {
                zero
            }
        }
    }
}

pub(crate) fn unary_backward<T: Scalar>(
    kind: UnaryKind,
    x: &Tensor<T>,
    y: &Tensor<T>,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let data = gy
        .data
        .iter()
        .zip(&x.data)
        .zip(&y.data)
        .map(|((&g, &xv), &yv)| g * unary_derivative(kind, xv, yv))
        .collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

fn check_axis(op: &'static str, t: &Tensor<impl Scalar>, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis("sum_axis", t, axis)?;
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = 1;
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &t.data[(o * len + k) * inner..(o * len + k + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(Tensor { shape, data })
}

/// Broadcasts a keep-dim reduction gradient back along `axis`.
pub(crate) fn expand_axis<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &g.data[o * inner..(o + 1) * inner];
        for _ in 0..len {
            data.extend_from_slice(src);
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Max along `axis` (keep-dim) and the arg-max index of every output element.
pub(crate) fn max_axis<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    check_axis("max_axis", t, axis)?;
    if t.numel() == 0 {
        return Err(Error::Empty { op: "max_axis" });
    }
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = 1;
    let mut data = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                let src = (o * len + k) * inner + i;
                let dst = o * inner + i;
                if t.data[src] > data[dst] || k == 0 {
                    data[dst] = t.data[src];
                    arg[dst] = src;
                }
            }
        }
    }
    Ok((Tensor { shape, data }, arg))
}

/// Softmax along axis 1 of an NCHW tensor, stabilised by max subtraction.
pub(crate) fn softmax_channel<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = v.dims4()?;
    if !v.all_finite() {
        return Err(Error::NonFinite { op: "softmax_channel" });
    }
    let hw = h * w;
    let mut out = vec![T::zero(); v.numel()];
    for b in 0..n {
        let base = b * c * hw;
        let mut maxv = vec![T::neg_infinity(); hw];
        for k in 0..c {
            for (m, &x) in maxv.iter_mut().zip(&v.data[base + k * hw..base + (k + 1) * hw]) {
                *m = m.max(x);
            }
        }
        let mut denom = vec![T::zero(); hw];
        for k in 0..c {
            let src = &v.data[base + k * hw..base + (k + 1) * hw];
            let dst = &mut out[base + k * hw..base + (k + 1) * hw];
            for i in 0..hw {
                let e = (src[i] - maxv[i]).exp();
                dst[i] = e;
                denom[i] += e;
            }
        }
        for k in 0..c {
            let dst = &mut out[base + k * hw..base + (k + 1) * hw];
            for i in 0..hw {
                dst[i] /= denom[i];
            }
        }
    }
    Ok(Tensor {
        shape: v.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_channel_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4().unwrap();
    let hw = h * w;
    let mut gx = vec![T::zero(); y.numel()];
    for b in 0..n {
        let base = b * c * hw;
        let mut dot = vec![T::zero(); hw];
        for k in 0..c {
            let off = base + k * hw;
            for i in 0..hw {
                dot[i] += y.data[off + i] * gy.data[off + i];
            }
        }
        for k in 0..c {
            let off = base + k * hw;
            for i in 0..hw {
                gx[off + i] = y.data[off + i] * (gy.data[off + i] - dot[i]);
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data: gx,
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one image `C×H×W` into columns `(C·K·K) × (Ho·Wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_check(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    let ([n, c, h, wd], [o, i, kh, kw]) = (x, w) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: x.to_vec(),
            reason: "input must be NCHW and weight OIKK".into(),
        });
    };
    if c != i {
        return Err(Error::ShapeMismatch {
            op: "conv2d (channels)",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if kh != kw || stride == 0 || h + 2 * pad < *kh || wd + 2 * pad < *kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            shape: w.to_vec(),
            reason: format!("kernel {kh}x{kw}, stride {stride}, pad {pad} on {h}x{wd}"),
        });
    }
    Ok(vec![
        *n,
        *o,
        conv_out(*h, *kh, stride, pad),
        conv_out(*wd, *kw, stride, pad),
    ])
}

/// Cross-correlation of an NCHW input with an `O×I×K×K` kernel, zero padded.
pub(crate) fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_check(&x.shape, &w.shape, stride, pad)?;
    let (n, c, h, wd) = x.dims4()?;
    let (o, k) = (w.shape[0], w.shape[2]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let plane = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![T::zero(); n * o * plane];
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
    for b in 0..n {
        let xin = &x.data[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[T] = if direct {
            xin
        } else {
            im2col(xin, c, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        T::gemm(
            o,
            ckk,
            plane,
            T::one(),
            &w.data,
            ckk as isize,
            1,
            src,
            plane as isize,
            1,
            T::zero(),
            &mut out[b * o * plane..(b + 1) * o * plane],
            plane as isize,
            1,
        );
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, k) = (w.shape[0], w.shape[2]);
    let (ho, wo) = (gy.shape[2], gy.shape[3]);
    let plane = ho * wo;
    let ckk = c * k * k;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut cols = vec![T::zero(); if direct { 0 } else { ckk * plane }];
    let mut gcols = vec![T::zero(); if need_x && !direct { ckk * plane } else { 0 }];
    for b in 0..n {
        let xin = &x.data[b * c * h * wd..(b + 1) * c * h * wd];
        let g = &gy.data[b * o * plane..(b + 1) * o * plane];
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if direct {
                xin
            } else {
                im2col(xin, c, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            // gw[o, ckk] += g[o, plane] @ src[ckk, plane]^T
            T::gemm(
                o,
                plane,
                ckk,
                T::one(),
                g,
                plane as isize,
                1,
                src,
                1,
                plane as isize,
                T::one(),
                gw,
                ckk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * c * h * wd..(b + 1) * c * h * wd];
            if direct {
                // gx[c, plane] = w^T[c, o] @ g[o, plane]
                T::gemm(
                    ckk,
                    o,
                    plane,
                    T::one(),
                    &w.data,
                    1,
                    ckk as isize,
                    g,
                    plane as isize,
                    1,
                    T::zero(),
                    dst,
                    plane as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    o,
                    plane,
                    T::one(),
                    &w.data,
                    1,
                    ckk as isize,
                    g,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut gcols,
                    plane as isize,
                    1,
                );
                col2im(&gcols, c, h, wd, k, stride, pad, dst);
            }
        }
    }
    (
        gx.map(|d| Tensor {
            shape: x.shape.clone(),
            data: d,
        }),
        gw.map(|d| Tensor {
            shape: w.shape.clone(),
            data: d,
        }),
    )
}

#[inline]
fn clamp_coord<T: Scalar>(v: T, size: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize(size - 1).unwrap();
    let inside = v >= T::zero() && v <= max;
    let c = v.max(T::zero()).min(max);
    let i0 = c.floor().to_usize().unwrap().min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let frac = c - T::from_usize(i0).unwrap();
    (i0, i1, frac, inside)
}

pub(crate) fn bilinear_check(img: &[usize], xs: &[usize], ys: &[usize]) -> Result<Vec<usize>> {
    let ([n, c, _, _], [nx, 1, ho, wo]) = (img, xs) else {
        return Err(Error::InvalidShape {
            op: "bilinear_sample",
            shape: xs.to_vec(),
            reason: "image NCHW and coordinates N×1×H'×W' required".into(),
        });
    };
    if xs != ys || nx != n {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            lhs: xs.to_vec(),
            rhs: ys.to_vec(),
        });
    }
    Ok(vec![*n, *c, *ho, *wo])
}

/// Bilinear sampling at absolute pixel coordinates, clamped to the border.
pub(crate) fn bilinear_sample<T: Scalar>(
    img: &Tensor<T>,
    xs: &Tensor<T>,
    ys: &Tensor<T>,
) -> Result<Tensor<T>> {
    let out_shape = bilinear_check(&img.shape, &xs.shape, &ys.shape)?;
    let (n, c, h, w) = img.dims4()?;
    let plane = out_shape[2] * out_shape[3];
    let mut out = vec![T::zero(); n * c * plane];
    for b in 0..n {
        for p in 0..plane {
            let (x0, x1, fx, _) = clamp_coord(xs.data[b * plane + p], w);
            let (y0, y1, fy, _) = clamp_coord(ys.data[b * plane + p], h);
            let one = T::one();
            let (w00, w01) = ((one - fy) * (one - fx), (one - fy) * fx);
            let (w10, w11) = (fy * (one - fx), fy * fx);
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let v = w00 * img.data[base + y0 * w + x0]
                    + w01 * img.data[base + y0 * w + x1]
                    + w10 * img.data[base + y1 * w + x0]
                    + w11 * img.data[base + y1 * w + x1];
                out[(b * c + ch) * plane + p] = v;
            }
        }
    }
    Tensor::new(out_shape, out)
}

#[allow(clippy::type_complexity)]
pub(crate) fn bilinear_backward<T: Scalar>(
    img: &Tensor<T>,
    xs: &Tensor<T>,
    ys: &Tensor<T>,
    gy: &Tensor<T>,
    need_img: bool,
    need_coords: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, h, w) = img.dims4().unwrap();
    let plane = xs.shape[2] * xs.shape[3];
    let mut gimg = need_img.then(|| vec![T::zero(); img.numel()]);
    let mut gx = need_coords.then(|| vec![T::zero(); xs.numel()]);
    let mut gyc = need_coords.then(|| vec![T::zero(); ys.numel()]);
    let one = T::one();
    for b in 0..n {
        for p in 0..plane {
            let (x0, x1, fx, xin) = clamp_coord(xs.data[b * plane + p], w);
            let (y0, y1, fy, yin) = clamp_coord(ys.data[b * plane + p], h);
            let (mut dx, mut dy) = (T::zero(), T::zero());
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let g = gy.data[(b * c + ch) * plane + p];
                if let Some(gi) = gimg.as_mut() {
                    gi[base + y0 * w + x0] += g * (one - fy) * (one - fx);
                    gi[base + y0 * w + x1] += g * (one - fy) * fx;
                    gi[base + y1 * w + x0] += g * fy * (one - fx);
                    gi[base + y1 * w + x1] += g * fy * fx;
                }
                if need_coords {
                    let v00 = img.data[base + y0 * w + x0];
                    let v01 = img.data[base + y0 * w + x1];
                    let v10 = img.data[base + y1 * w + x0];
                    let v11 = img.data[base + y1 * w + x1];
                    dx += g * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy += g * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if let (Some(gx), Some(gyc)) = (gx.as_mut(), gyc.as_mut()) {
                // Clamped coordinates and the degenerate last cell carry no gradient.
                if xin && x1 != x0 {
                    gx[b * plane + p] = dx;
                }
                if yin && y1 != y0 {
                    gyc[b * plane + p] = dy;
                }
            }
        }
    }
    let wrap = |d: Vec<T>, shape: &[usize]| Tensor {
        shape: shape.to_vec(),
        data: d,
    };
    (
        gimg.map(|d| wrap(d, &img.shape)),
        gx.map(|d| wrap(d, &xs.shape)),
        gyc.map(|d| wrap(d, &ys.shape)),
    )
}

/// Per-channel horizontal shift: `out[n,c,y,x] = a[n,c,y,x - shift[c]]`, linearly
/// interpolated and clamped at the border. `shifts` has one entry or one per channel.
pub(crate) fn shift_h<T: Scalar>(a: &Tensor<T>, shifts: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4()?;
    if shifts.len() != 1 && shifts.len() != c {
        return Err(Error::InvalidShape {
            op: "shift_h",
            shape: a.shape.clone(),
            reason: format!("{} shifts for {c} channels", shifts.len()),
        });
    }
    let mut out = vec![T::zero(); a.numel()];
    for b in 0..n {
        for ch in 0..c {
            let s = shifts[if shifts.len() == 1 { 0 } else { ch }];
            let taps = shift_taps(s, w);
            for y in 0..h {
                let off = ((b * c + ch) * h + y) * w;
                let src = &a.data[off..off + w];
                let dst = &mut out[off..off + w];
                for (x, &(i0, i1, f)) in taps.iter().enumerate() {
                    dst[x] = src[i0] + f * (src[i1] - src[i0]);
                }
            }
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: out,
    })
}

fn shift_taps<T: Scalar>(s: T, w: usize) -> Vec<(usize, usize, T)> {
    (0..w)
        .map(|x| {
            let (i0, i1, f, _) = clamp_coord(T::from_usize(x).unwrap() - s, w);
            (i0, i1, f)
        })
        .collect()
}

pub(crate) fn shift_h_backward<T: Scalar>(a_shape: &[usize], shifts: &[T], gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = a_shape[..] else { unreachable!() };
    let mut g = vec![T::zero(); gy.numel()];
    for b in 0..n {
        for ch in 0..c {
            let s = shifts[if shifts.len() == 1 { 0 } else { ch }];
            let taps = shift_taps(s, w);
            for y in 0..h {
                let off = ((b * c + ch) * h + y) * w;
                for (x, &(i0, i1, f)) in taps.iter().enumerate() {
                    let gv = gy.data[off + x];
                    g[off + i0] += gv * (T::one() - f);
                    g[off + i1] += gv * f;
                }
            }
        }
    }
    Tensor {
        shape: a_shape.to_vec(),
        data: g,
    }
}

/// Source taps of a 2× bilinear upsample along one axis (half-pixel centres).
fn upsample_taps<T: Scalar>(in_len: usize) -> Vec<(usize, usize, T)> {
    (0..in_len * 2)
        .map(|o| {
            let src = (T::from_usize(o).unwrap() + T::lit(0.5)) * T::lit(0.5) - T::lit(0.5);
            let (i0, i1, f, _) = clamp_coord(src, in_len);
            (i0, i1, f)
        })
        .collect()
}

pub(crate) fn upsample2x<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = a.dims4()?;
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut rowbuf = vec![T::zero(); wo];
    let one = T::one();
    for nc in 0..n * c {
        let src = &a.data[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (one - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (one - fx) + src[y1 * w + x1] * fx;
                rowbuf[ox] = top * (one - fy) + bot * fy;
            }
            dst[oy * wo..(oy + 1) * wo].copy_from_slice(&rowbuf);
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(a_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = a_shape[..] else { unreachable!() };
    let (ty, tx) = (upsample_taps::<T>(h), upsample_taps::<T>(w));
    let wo = 2 * w;
    let mut g = vec![T::zero(); n * c * h * w];
    let one = T::one();
    for nc in 0..n * c {
        let src = &gy.data[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        let dst = &mut g[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * wo + ox];
                dst[y0 * w + x0] += v * (one - fy) * (one - fx);
                dst[y0 * w + x1] += v * (one - fy) * fx;
                dst[y1 * w + x0] += v * fy * (one - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor {
        shape: a_shape.to_vec(),
        data: g,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PoolKind {
    Max,
    Avg,
}

/// 3×3 stride-1 pooling with edge-replicated borders; output shape equals input shape.
/// For max pooling also returns the flat source index of every output element.
pub(crate) fn pool3<T: Scalar>(a: &Tensor<T>, kind: PoolKind) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = a.dims4()?;
    if a.numel() == 0 {
        return Err(Error::Empty { op: "pool3x3" });
    }
    let mut out = vec![T::zero(); a.numel()];
    let mut arg = if kind == PoolKind::Max { vec![0; a.numel()] } else { Vec::new() };
    let ninth = T::lit(1.0 / 9.0);
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                let mut acc = T::zero();
                for dy in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let i = base + yy * w + xx;
                        let v = a.data[i];
                        acc += v;
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                let o = base + y * w + x;
                match kind {
                    PoolKind::Max => {
                        out[o] = best;
                        arg[o] = best_i;
                    }
                    PoolKind::Avg => out[o] = acc * ninth,
                }
            }
        }
    }
    Ok((
        Tensor {
            shape: a.shape.clone(),
            data: out,
        },
        arg,
    ))
}

pub(crate) fn avgpool3_backward<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = gy.dims4().unwrap();
    let mut g = vec![T::zero(); gy.numel()];
    let ninth = T::lit(1.0 / 9.0);
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..h {
            for x in 0..w {
                let v = gy.data[base + y * w + x] * ninth;
                for dy in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        g[base + yy * w + xx] += v;
                    }
                }
            }
        }
    }
    Tensor {
        shape: gy.shape.clone(),
        data: g,
    }
}

pub(crate) fn scatter_arg<T: Scalar>(shape: &[usize], arg: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(shape.to_vec());
    for (&i, &v) in arg.iter().zip(&gy.data) {
        g.data[i] += v;
    }
    g
}

/// Concatenation along `axis`.
pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(Error::Empty { op: "concat" })?;
    check_axis("concat", first, axis)?;
    for p in parts {
        let same = p.rank() == first.rank()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let outer: usize = first.shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk: usize = p.shape[axis..].iter().product();
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Slice `[start, start+len)` along `axis`.
pub(crate) fn narrow<T: Scalar>(a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis("narrow", a, axis)?;
    if start + len > a.shape[axis] {
        return Err(Error::InvalidShape {
            op: "narrow",
            shape: a.shape.clone(),
            reason: format!("range {start}..{} on axis {axis}", start + len),
        });
    }
    let (outer, full, inner) = split_axis(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn narrow_backward<T: Scalar>(
    a_shape: &[usize],
    axis: usize,
    start: usize,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let (outer, full, inner) = split_axis(a_shape, axis);
    let len = gy.shape[axis];
    let mut g = Tensor::zeros(a_shape.to_vec());
    for o in 0..outer {
        let base = (o * full + start) * inner;
        g.data[base..base + len * inner]
            .copy_from_slice(&gy.data[o * len * inner..(o + 1) * len * inner]);
    }
    g
}

pub(crate) fn flip_last<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let w = *a.shape.last().unwrap_or(&1);
    let mut data = a.data.clone();
    if w > 0 {
        for row in data.chunks_mut(w) {
            row.reverse();
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

/// Forward differences along the width (`axis = 3`) or height (`axis = 2`) of NCHW.
#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn broadcast_channel_mask() {
        let a = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = t(&[1, 1, 1, 2], &[10.0, 100.0]);
        let y = binary(BinaryKind::Mul, &a, &m).unwrap();
        assert_eq!(y.data(), &[10.0, 200.0, 30.0, 400.0]);
        let g = reduce_to_shape(Tensor::<f64>::ones(vec![1, 2, 1, 2]), &[1, 1, 1, 2]);
        assert_eq!(g.data(), &[2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        let err = binary(BinaryKind::Add, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let id = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &id, 1, 0).unwrap().data(), x.data());

        let c = Tensor::<f64>::full(vec![1, 1, 5, 5], 0.7);
        let ones = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&c, &ones, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert!((y.at4(0, 0, 2, 2) - 9.0 * 0.7).abs() < 1e-12);
        assert!((y.at4(0, 0, 0, 0) - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 8, 16]);
        let w = Tensor::<f64>::zeros(vec![5, 3, 3, 3]);
        assert_eq!(conv2d(&x, &w, 2, 1).unwrap().shape(), &[2, 5, 4, 8]);
        let bad = Tensor::<f64>::zeros(vec![5, 4, 3, 3]);
        assert!(conv2d(&x, &bad, 1, 1).is_err());
    }

    #[test]
    fn bilinear_nodes_and_midpoint() {
        let img = t(&[1, 1, 1, 3], &[4.0, 8.0, 2.0]);
        let xs = t(&[1, 1, 1, 4], &[0.0, 1.0, 0.5, 7.0]);
        let ys = Tensor::zeros(vec![1, 1, 1, 4]);
        let y = bilinear_sample(&img, &xs, &ys).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0, 6.0, 2.0]);
    }

    #[test]
    fn shift_moves_spike() {
        let mut v = Tensor::<f64>::zeros(vec![1, 1, 1, 10]);
        v.data_mut()[5] = 1.0;
        let y = shift_h(&v, &[2.0]).unwrap();
        assert_eq!(y.data()[7], 1.0);
        assert_eq!(y.sum(), 1.0);
    }

    #[test]
    fn upsample_constant_and_shape() {
        let a = Tensor::<f64>::full(vec![1, 2, 3, 4], 1.5);
        let y = upsample2x(&a).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 8]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn maxpool_spike_plateau() {
        let mut a = Tensor::<f64>::zeros(vec![1, 1, 5, 5]);
        a.data_mut()[12] = 3.0;
        let (y, _) = pool3(&a, PoolKind::Max).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&yy) && (1..=3).contains(&xx) { 3.0 } else { 0.0 };
                assert_eq!(y.at4(0, 0, yy, xx), expect);
            }
        }
        let c = Tensor::<f64>::full(vec![1, 1, 4, 4], 2.0);
        assert_eq!(pool3(&c, PoolKind::Max).unwrap().0, c);
    }

    #[test]
    fn concat_and_narrow_invert() {
        let a = Tensor::<f64>::from_fn(vec![2, 2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 1, 1, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 3]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
    }
}
