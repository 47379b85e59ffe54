use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer normalization over the last axis.
pub fn layer_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
    let axis = x
        .shape()
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::dim("layer_norm", "rank", "scalar input"))?;
    layer_norm_axis(x, axis, gamma, beta, eps)
}

/// Layer normalization over one axis (biased variance), followed by a
/// per-channel affine map. With `axis = 1` on `[N, C, H, W]` this normalizes
/// the channel vector at every spatial position.
pub fn layer_norm_axis<'t>(
    x: &Var<'t>,
    axis: usize,
    gamma: &Var<'t>,
    beta: &Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    super::same_tape("layer_norm", x, gamma)?;
    super::same_tape("layer_norm", x, beta)?;
    let shape = x.shape().to_vec();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::dim(
            "layer_norm",
            "axis",
            format!("axis {axis} of {shape:?}"),
        ));
    }
    let c = shape[axis];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "layer_norm",
            "affine",
            format!(
                "gamma {:?} / beta {:?} vs {c} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps < 0.0 {
        return Err(Error::contract("layer_norm", "eps must be non-negative"));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.value().data();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; outer * inner];
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * c * inner + i;
            let mean = (0..c).map(|k| xd[base + k * inner]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|k| {
                    let d = xd[base + k * inner] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for k in 0..c {
                let idx = base + k * inner;
                let h = (xd[idx] - mean) * r;
                xhat[idx] = h;
                out[idx] = h * gd[k] + bd[k];
            }
        }
    }
    let gv = gamma.shared();
    Ok(x.tape().record(
        Tensor::from_parts(shape.clone(), out),
        &[x, gamma, beta],
        move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = needs[0].then(|| vec![0.0; gd.len()]);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * c * inner + i;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for k in 0..c {
                        let idx = base + k * inner;
                        dgamma[k] += gd[idx] * xhat[idx];
                        dbeta[k] += gd[idx];
                        let dh = gd[idx] * gv.data()[k];
                        m1 += dh;
                        m2 += dh * xhat[idx];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (m1 / c as f64, m2 / c as f64);
                        let r = rstd[o * inner + i];
                        for k in 0..c {
                            let idx = base + k * inner;
                            let dh = gd[idx] * gv.data()[k];
                            dx[idx] = r * (dh - m1 - xhat[idx] * m2);
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(shape.clone(), d)),
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        },
    ))
}

/// Numerically stable softmax over the last axis. Entries equal to `-inf`
/// are masked: they receive exactly zero probability and zero gradient.
pub fn softmax_lastaxis<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape().to_vec();
    let n = *shape
        .last()
        .ok_or_else(|| Error::dim("softmax", "last axis", "scalar input"))?;
    if n == 0 {
        return Err(Error::dim("softmax", "last axis", "empty last axis"));
    }
    let xd = x.value().data();
    let mut out = vec![0.0; xd.len()];
    for (row, o) in xd.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::contract(
                "softmax",
                "every entry of a slice is masked",
            ));
        }
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = if xi == f64::NEG_INFINITY {
                0.0
            } else {
                (xi - m).exp()
            };
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    let probs = Tensor::from_parts(shape.clone(), out);
    let saved = probs.clone();
    Ok(x.tape().record(probs, &[x], move |g, _| {
        let mut dx = vec![0.0; g.numel()];
        for ((p, gr), d) in saved
            .data()
            .chunks_exact(n)
            .zip(g.data().chunks_exact(n))
            .zip(dx.chunks_exact_mut(n))
        {
            let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
            for k in 0..n {
                d[k] = p[k] * (gr[k] - dot);
            }
        }
        vec![Some(Tensor::from_parts(shape.clone(), dx))]
    }))
}
