//! Differentiable primitives. Every function records itself on the tape of its
//! inputs and returns a new [`Var`].

mod conv;
mod norm;
mod resample;

pub use conv::{conv2d, Conv2dSpec};
pub use norm::{layer_norm, layer_norm_axis, softmax_lastaxis};
pub use resample::{bilinear_resize, pixel_shuffle, pixel_unshuffle};

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn same_tape<'t>(op: &'static str, a: &Var<'t>, b: &Var<'t>) -> Result<()> {
    if std::ptr::eq(a.tape(), b.tape()) {
        Ok(())
    } else {
        Err(Error::contract(op, "operands live on different tapes"))
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "shape",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_tape("add", a, b)?;
    check_same_shape("add", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x + y);
    Ok(a.tape().record(out, &[a, b], |g, needs| {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }))
}

pub fn sub<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_tape("sub", a, b)?;
    check_same_shape("sub", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x - y);
    Ok(a.tape().record(out, &[a, b], |g, needs| {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]
    }))
}

pub fn mul<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_tape("mul", a, b)?;
    check_same_shape("mul", a.value(), b.value())?;
    let out = a.value().zip_map(b.value(), |x, y| x * y);
    let (av, bv) = (a.shared(), b.shared());
    Ok(a.tape().record(out, &[a, b], move |g, needs| {
        vec![
            needs[0].then(|| g.zip_map(&bv, |g, y| g * y)),
            needs[1].then(|| g.zip_map(&av, |g, x| g * x)),
        ]
    }))
}

pub fn scale<'t>(a: &Var<'t>, s: f64) -> Var<'t> {
    let out = a.value().map(|x| x * s);
    a.tape()
        .record(out, &[a], move |g, _| vec![Some(g.map(|x| x * s))])
}

fn unary<'t>(x: &Var<'t>, f: impl Fn(f64) -> f64, df: fn(f64) -> f64) -> Var<'t> {
    let out = x.value().map(f);
    let xv = x.shared();
    x.tape().record(out, &[x], move |g, _| {
        vec![Some(g.zip_map(&xv, |g, x| g * df(x)))]
    })
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn silu_f(x: f64) -> f64 {
    x * sigmoid_f(x)
}

fn silu_df(x: f64) -> f64 {
    let s = sigmoid_f(x);
    s * (1.0 + x * (1.0 - s))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_df(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `x · sigmoid(x)`.
pub fn silu<'t>(x: &Var<'t>) -> Var<'t> {
    unary(x, silu_f, silu_df)
}

/// Exact (erf-based) GELU.
pub fn gelu<'t>(x: &Var<'t>) -> Var<'t> {
    unary(x, gelu_f, gelu_df)
}

/// `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus<'t>(x: &Var<'t>) -> Var<'t> {
    unary(x, softplus_f, sigmoid_f)
}

pub fn sigmoid<'t>(x: &Var<'t>) -> Var<'t> {
    unary(x, sigmoid_f, |x| {
        let s = sigmoid_f(x);
        s * (1.0 - s)
    })
}

/// Splits a `[N, C, ...]` shape into `(N, C, inner)`.
pub(crate) fn nc_inner(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(
            op,
            "rank",
            format!("expected [N, C, ...], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `x[n, c, ...] · w[c]`.
pub fn mul_channels<'t>(x: &Var<'t>, w: &Var<'t>) -> Result<Var<'t>> {
    same_tape("mul_channels", x, w)?;
    let (n, c, inner) = nc_inner("mul_channels", x.shape())?;
    if w.shape() != [c] {
        return Err(Error::dim(
            "mul_channels",
            "channels",
            format!("weight {:?} vs {c} channels", w.shape()),
        ));
    }
    let (xv, wv) = (x.shared(), w.shared());
    let mut out = xv.as_ref().clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= wv.data()[(i / inner) % c];
    }
    Ok(x.tape().record(out, &[x, w], move |g, needs| {
        let gx = needs[0].then(|| {
            let mut gx = g.clone();
            for (i, v) in gx.data_mut().iter_mut().enumerate() {
                *v *= wv.data()[(i / inner) % c];
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    gw[ch] += g.data()[off..off + inner]
                        .iter()
                        .zip(&xv.data()[off..off + inner])
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                }
            }
            Tensor::from_parts(vec![c], gw)
        });
        vec![gx, gw]
    }))
}

/// `x[n, c, ...] · g[n, 0, ...]`: one gate map shared by every channel.
pub fn mul_broadcast_channels<'t>(x: &Var<'t>, gate: &Var<'t>) -> Result<Var<'t>> {
    same_tape("mul_broadcast_channels", x, gate)?;
    let (n, c, inner) = nc_inner("mul_broadcast_channels", x.shape())?;
    let mut want = x.shape().to_vec();
    want[1] = 1;
    if gate.shape() != want.as_slice() {
        return Err(Error::dim(
            "mul_broadcast_channels",
            "gate",
            format!("expected {want:?}, got {:?}", gate.shape()),
        ));
    }
    let (xv, gv) = (x.shared(), gate.shared());
    let mut out = xv.as_ref().clone();
    for b in 0..n {
        let gs = &gv.data()[b * inner..(b + 1) * inner];
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for (o, g) in out.data_mut()[off..off + inner].iter_mut().zip(gs) {
                *o *= g;
            }
        }
    }
    Ok(x.tape().record(out, &[x, gate], move |g, needs| {
        let gx = needs[0].then(|| {
            let mut gx = g.clone();
            for b in 0..n {
                let gs = &gv.data()[b * inner..(b + 1) * inner];
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for (o, s) in gx.data_mut()[off..off + inner].iter_mut().zip(gs) {
                        *o *= s;
                    }
                }
            }
            gx
        });
        let gg = needs[1].then(|| {
            let mut gg = vec![0.0; n * inner];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in 0..inner {
                        gg[b * inner + i] += g.data()[off + i] * xv.data()[off + i];
                    }
                }
            }
            Tensor::from_parts(gv.shape().to_vec(), gg)
        });
        vec![gx, gg]
    }))
}

/// Multiplies each batch item by a constant factor (drop-path masks).
pub fn scale_per_sample<'t>(x: &Var<'t>, factors: &[f64]) -> Result<Var<'t>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if factors.len() != n {
        return Err(Error::dim(
            "scale_per_sample",
            "batch",
            format!("{} factors for batch {n}", factors.len()),
        ));
    }
    let per = x.value().numel() / n.max(1);
    let factors: Rc<[f64]> = factors.into();
    let apply = {
        let factors = Rc::clone(&factors);
        move |t: &Tensor| {
            let mut o = t.clone();
            for (i, v) in o.data_mut().iter_mut().enumerate() {
                *v *= factors[i / per];
            }
            o
        }
    };
    let out = apply(x.value());
    Ok(x.tape().record(out, &[x], move |g, _| vec![Some(apply(g))]))
}

/// Sum of all elements, as a rank-0 tensor.
pub fn sum<'t>(x: &Var<'t>) -> Var<'t> {
    let out = Tensor::scalar(x.value().sum());
    let shape = x.shape().to_vec();
    x.tape().record(out, &[x], move |g, _| {
        vec![Some(Tensor::full(&shape, g.item()))]
    })
}

/// `Σ w ⊙ x` with a constant weight tensor, as a rank-0 tensor.
pub fn weighted_sum<'t>(x: &Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    check_same_shape("weighted_sum", x.value(), w)?;
    let s: f64 = x
        .value()
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| a * b)
        .sum();
    let w = w.clone();
    Ok(x.tape().record(Tensor::scalar(s), &[x], move |g, _| {
        vec![Some(w.map(|v| v * g.item()))]
    }))
}

pub fn reshape<'t>(x: &Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let out = x.value().reshape(shape)?;
    let orig = x.shape().to_vec();
    Ok(x.tape().record(out, &[x], move |g, _| {
        vec![Some(g.reshape(&orig).expect("reshape back"))]
    }))
}

/// Channels `[start, start + len)` of a `[N, C, ...]` tensor.
pub fn slice_channels<'t>(x: &Var<'t>, start: usize, len: usize) -> Result<Var<'t>> {
    let (n, c, inner) = nc_inner("slice_channels", x.shape())?;
    if start + len > c || len == 0 {
        return Err(Error::dim(
            "slice_channels",
            "channels",
            format!("range {start}..{} outside {c} channels", start + len),
        ));
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    let mut data = Vec::with_capacity(n * len * inner);
    for b in 0..n {
        let off = (b * c + start) * inner;
        data.extend_from_slice(&x.value().data()[off..off + len * inner]);
    }
    let full = x.shape().to_vec();
    Ok(x.tape()
        .record(Tensor::from_parts(shape, data), &[x], move |g, _| {
            let mut gx = Tensor::zeros(&full);
            for b in 0..n {
                let dst = (b * c + start) * inner;
                let src = b * len * inner;
                gx.data_mut()[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(gx)]
        }))
}

/// Concatenates `[N, C_i, ...]` tensors along the channel axis.
pub fn concat_channels<'t>(xs: &[&Var<'t>]) -> Result<Var<'t>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
    let (n, _, inner) = nc_inner("concat_channels", first.shape())?;
    let mut widths = Vec::with_capacity(xs.len());
    for x in xs {
        same_tape("concat_channels", first, x)?;
        let (xn, xc, xi) = nc_inner("concat_channels", x.shape())?;
        if xn != n || xi != inner || x.shape()[2..] != first.shape()[2..] {
            return Err(Error::dim(
                "concat_channels",
                "shape",
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
        widths.push(xc);
    }
    let total: usize = widths.iter().sum();
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    let mut data = Vec::with_capacity(n * total * inner);
    for b in 0..n {
        for (x, &w) in xs.iter().zip(&widths) {
            data.extend_from_slice(&x.value().data()[b * w * inner..(b + 1) * w * inner]);
        }
    }
    let parents: Vec<&Var<'t>> = xs.to_vec();
    let rest = first.shape()[2..].to_vec();
    Ok(first.tape().record(
        Tensor::from_parts(shape, data),
        &parents,
        move |g, needs| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (i, &w) in widths.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(n * w * inner);
                    for b in 0..n {
                        let off = (b * total + start) * inner;
                        d.extend_from_slice(&g.data()[off..off + w * inner]);
                    }
                    let mut s = vec![n, w];
                    s.extend_from_slice(&rest);
                    out.push(Some(Tensor::from_parts(s, d)));
                } else {
                    out.push(None);
                }
                start += w;
            }
            out
        },
    ))
}

/// Mean over all positions after the channel axis: `[N, C, H, W] → [N, C, 1, 1]`.
pub fn global_avg_pool<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let (n, c, inner) = nc_inner("global_avg_pool", x.shape())?;
    if x.shape().len() != 4 || inner == 0 {
        return Err(Error::dim(
            "global_avg_pool",
            "rank",
            format!("{:?}", x.shape()),
        ));
    }
    let data: Vec<f64> = x
        .value()
        .data()
        .chunks_exact(inner)
        .map(|ch| ch.iter().sum::<f64>() / inner as f64)
        .collect();
    let full = x.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_parts(vec![n, c, 1, 1], data),
        &[x],
        move |g, _| {
            let mut gx = Tensor::zeros(&full);
            for (dst, gv) in gx.data_mut().chunks_exact_mut(inner).zip(g.data()) {
                dst.fill(gv / inner as f64);
            }
            vec![Some(gx)]
        },
    ))
}

/// `[N, C, 1, 1] → [N, C, H, W]` by repetition.
pub fn broadcast_spatial<'t>(x: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[2] != 1 || s[3] != 1 {
        return Err(Error::dim(
            "broadcast_spatial",
            "spatial",
            format!("expected [N,C,1,1], got {s:?}"),
        ));
    }
    let (n, c) = (s[0], s[1]);
    let inner = h * w;
    let mut data = Vec::with_capacity(n * c * inner);
    for &v in x.value().data() {
        data.extend(std::iter::repeat_n(v, inner));
    }
    Ok(x.tape().record(
        Tensor::from_parts(vec![n, c, h, w], data),
        &[x],
        move |g, _| {
            let d = g
                .data()
                .chunks_exact(inner)
                .map(|ch| ch.iter().sum())
                .collect();
            vec![Some(Tensor::from_parts(vec![n, c, 1, 1], d))]
        },
    ))
}

/// Mean softmax cross-entropy of `[N, K]` logits against class indices.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim(
            "cross_entropy",
            "batch",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(
            "cross_entropy",
            format!("label {bad} >= {k} classes"),
        ));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for b in 0..n {
        let row = &logits.value().data()[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for j in 0..k {
            probs[b * k + j] = (row[j] - m).exp() / z;
        }
        loss += -(row[labels[b]] - m - z.ln());
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    Ok(logits
        .tape()
        .record(Tensor::scalar(loss), &[logits], move |g, _| {
            let scale = g.item() / n as f64;
            let mut d = probs.clone();
            for (b, &l) in labels.iter().enumerate() {
                d[b * k + l] -= 1.0;
            }
            for v in &mut d {
                *v *= scale;
            }
            vec![Some(Tensor::from_parts(vec![n, k], d))]
        }))
}
