//! Selective scan with a scalar state per channel.
//!
//! `h_t = exp(δ_t·A_c)·h_{t−1} + δ_t·b_t·u_t` with `h_{−1} = 0` and
//! `A_c = −exp(a_log_c)`. The recurrence is a prefix scan over pairs
//! `(g_t, x_t) = (exp(δ_t·A_c), δ_t·b_t·u_t)` under
//! `(g₁, x₁) ⊕ (g₂, x₂) = (g₁·g₂, x₁·g₂ + x₂)`.

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{conv2d, reshape, softplus, Conv2dSpec};
use crate::tensor::Tensor;

/// Per-token scan inputs and per-channel learnables.
#[derive(Debug, Clone)]
pub struct ScanParams<'t> {
    /// `[N, C, L]`, positive.
    pub delta: Var<'t>,
    /// `[N, 1, L]`.
    pub b: Var<'t>,
    /// `[N, 1, L]`.
    pub cprime: Var<'t>,
    /// `[C]`.
    pub a_log: Var<'t>,
    /// `[C]`.
    pub d: Var<'t>,
}

/// Scan states `[N, C, L]` in raster order.
#[derive(Debug, Clone)]
pub struct HiddenStateMap<'t> {
    pub s: Var<'t>,
}

/// Projections from the feature map to the scan inputs.
#[derive(Debug, Clone)]
pub struct ScanProjection<'t> {
    /// `[C, C, 1, 1]` and `[C]`.
    pub w_delta: Var<'t>,
    pub b_delta: Var<'t>,
    /// `[1, C, 1, 1]` and `[1]`.
    pub w_b: Var<'t>,
    pub b_b: Var<'t>,
    pub w_c: Var<'t>,
    pub b_c: Var<'t>,
    pub a_log: Var<'t>,
    pub d: Var<'t>,
}

/// Flattens `y: [N, C, H, W]` to raster order and projects it to
/// `δ = softplus(W_δ y + b_δ)`, `B` and `C′`.
pub fn make_scan_params<'t>(y: &Var<'t>, proj: &ScanProjection<'t>) -> Result<ScanParams<'t>> {
    let s = y.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "make_scan_params",
            "rank",
            format!("expected [N,C,H,W], got {s:?}"),
        ));
    }
    let (n, c, l) = (s[0], s[1], s[2] * s[3]);
    let pw = Conv2dSpec::pointwise();
    let delta = softplus(&conv2d(y, &proj.w_delta, Some(&proj.b_delta), pw)?);
    let b = conv2d(y, &proj.w_b, Some(&proj.b_b), pw)?;
    let cprime = conv2d(y, &proj.w_c, Some(&proj.b_c), pw)?;
    Ok(ScanParams {
        delta: reshape(&delta, &[n, c, l])?,
        b: reshape(&b, &[n, 1, l])?,
        cprime: reshape(&cprime, &[n, 1, l])?,
        a_log: proj.a_log.clone(),
        d: proj.d.clone(),
    })
}

/// The scan's associative combine.
#[inline]
pub fn combine(p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    (p.0 * q.0, p.1 * q.0 + q.1)
}

const IDENTITY: (f64, f64) = (1.0, 0.0);

struct Dims {
    n: usize,
    c: usize,
    l: usize,
}

fn validate(op: &'static str, u: &Var<'_>, p: &ScanParams<'_>) -> Result<Dims> {
    let s = u.shape();
    if s.len() != 3 {
        return Err(Error::dim(
            op,
            "rank",
            format!("u must be [N,C,L], got {s:?}"),
        ));
    }
    let (n, c, l) = (s[0], s[1], s[2]);
    if p.delta.shape() != s {
        return Err(Error::dim(
            op,
            "delta",
            format!("{:?} vs u {s:?}", p.delta.shape()),
        ));
    }
    if p.b.shape() != [n, 1, l] {
        return Err(Error::dim(
            op,
            "b",
            format!("expected [{n}, 1, {l}], got {:?}", p.b.shape()),
        ));
    }
    if p.a_log.shape() != [c] {
        return Err(Error::dim(
            op,
            "a_log",
            format!("expected [{c}], got {:?}", p.a_log.shape()),
        ));
    }
    if let Some(bad) = p.delta.value().data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::contract(
            op,
            format!("delta must be positive, found {bad}"),
        ));
    }
    Ok(Dims { n, c, l })
}

/// `(g, x)` pairs for one `(n, c)` sequence.
fn pairs(u: &[f64], delta: &[f64], b: &[f64], a: f64, g: &mut [f64], x: &mut [f64]) {
    for t in 0..u.len() {
        g[t] = (delta[t] * a).exp();
        x[t] = delta[t] * b[t] * u[t];
    }
}

fn naive_sequence(g: &[f64], x: &[f64], h: &mut [f64]) {
    let mut state = 0.0;
    for t in 0..g.len() {
        state = g[t] * state + x[t];
        h[t] = state;
    }
}

/// Below this many independent combines per tree level the level runs on the
/// calling thread.
const PAR_LEVEL_MIN: usize = 4096;

/// Work-efficient (up-sweep / down-sweep) inclusive scan of one sequence.
fn blelloch_sequence(g: &[f64], x: &[f64], h: &mut [f64]) {
    let l = g.len();
    if l == 0 {
        return;
    }
    let size = l.next_power_of_two();
    let mut tree: Vec<(f64, f64)> = (0..size)
        .map(|t| if t < l { (g[t], x[t]) } else { IDENTITY })
        .collect();

    let mut stride = 1;
    while stride < size {
        let up = |chunk: &mut [(f64, f64)]| {
            chunk[2 * stride - 1] = combine(chunk[stride - 1], chunk[2 * stride - 1]);
        };
        if size / (2 * stride) >= PAR_LEVEL_MIN {
            tree.par_chunks_mut(2 * stride).for_each(up);
        } else {
            tree.chunks_mut(2 * stride).for_each(up);
        }
        stride *= 2;
    }

    tree[size - 1] = IDENTITY;
    while stride > 1 {
        stride /= 2;
        let down = |chunk: &mut [(f64, f64)]| {
            let left = chunk[stride - 1];
            let prefix = chunk[2 * stride - 1];
            chunk[stride - 1] = prefix;
            chunk[2 * stride - 1] = combine(prefix, left);
        };
        if size / (2 * stride) >= PAR_LEVEL_MIN {
            tree.par_chunks_mut(2 * stride).for_each(down);
        } else {
            tree.chunks_mut(2 * stride).for_each(down);
        }
    }

    // Exclusive prefix ⊕ own element gives the inclusive state.
    for t in 0..l {
        h[t] = combine(tree[t], (g[t], x[t])).1;
    }
}

#[derive(Clone, Copy)]
enum Mode {
    Naive,
    Parallel,
}

fn scan_op<'t>(
    op: &'static str,
    u: &Var<'t>,
    p: &ScanParams<'t>,
    mode: Mode,
) -> Result<HiddenStateMap<'t>> {
    let Dims { n, c, l } = validate(op, u, p)?;
    let (uv, dv, bv, av) = (u.shared(), p.delta.shared(), p.b.shared(), p.a_log.shared());
    let a: Vec<f64> = av.data().iter().map(|v| -v.exp()).collect();
    let mut gs = vec![0.0; n * c * l];
    let mut xs = vec![0.0; n * c * l];
    let mut hs = vec![0.0; n * c * l];
    if l > 0 {
        let (ud, dd, bd) = (uv.data(), dv.data(), bv.data());
        gs.par_chunks_mut(l)
            .zip(xs.par_chunks_mut(l))
            .zip(hs.par_chunks_mut(l))
            .enumerate()
            .for_each(|(seq, ((g, x), h))| {
                let (b, ch) = (seq / c, seq % c);
                let span = seq * l..(seq + 1) * l;
                pairs(
                    &ud[span.clone()],
                    &dd[span],
                    &bd[b * l..(b + 1) * l],
                    a[ch],
                    g,
                    x,
                );
                match mode {
                    Mode::Naive => naive_sequence(g, x, h),
                    Mode::Parallel => blelloch_sequence(g, x, h),
                }
            });
    }
    drop(xs);
    let states = Tensor::from_parts(vec![n, c, l], hs);
    let saved = states.clone();
    let s = u.tape().record(
        states,
        &[u, &p.delta, &p.b, &p.a_log],
        move |gout, needs| {
            let (ud, dd, bd, hd, go) = (uv.data(), dv.data(), bv.data(), saved.data(), gout.data());
            let mut du = vec![0.0; n * c * l];
            let mut ddelta = vec![0.0; n * c * l];
            let mut db = vec![0.0; n * l];
            let mut da = vec![0.0; c];
            for seq in 0..n * c {
                let (b, ch) = (seq / c, seq % c);
                let off = seq * l;
                let mut lambda = 0.0;
                for t in (0..l).rev() {
                    let i = off + t;
                    lambda = go[i] + if t + 1 < l { gs[i + 1] * lambda } else { 0.0 };
                    let prev = if t > 0 { hd[i - 1] } else { 0.0 };
                    let dg = lambda * prev;
                    let bt = bd[b * l + t];
                    du[i] = lambda * dd[i] * bt;
                    ddelta[i] = lambda * bt * ud[i] + dg * gs[i] * a[ch];
                    db[b * l + t] += lambda * dd[i] * ud[i];
                    da[ch] += dg * gs[i] * dd[i];
                }
            }
            let dalog: Vec<f64> = da.iter().zip(&a).map(|(d, a)| d * a).collect();
            vec![
                needs[0].then(|| Tensor::from_parts(vec![n, c, l], du)),
                needs[1].then(|| Tensor::from_parts(vec![n, c, l], ddelta)),
                needs[2].then(|| Tensor::from_parts(vec![n, 1, l], db)),
                needs[3].then(|| Tensor::from_parts(vec![c], dalog)),
            ]
        },
    );
    Ok(HiddenStateMap { s })
}

/// Sequential recurrence, one step per token.
pub fn scan_naive<'t>(u: &Var<'t>, p: &ScanParams<'t>) -> Result<HiddenStateMap<'t>> {
    scan_op("scan_naive", u, p, Mode::Naive)
}

/// Same states as [`scan_naive`], computed as a work-efficient prefix scan.
pub fn scan_parallel<'t>(u: &Var<'t>, p: &ScanParams<'t>) -> Result<HiddenStateMap<'t>> {
    scan_op("scan_parallel", u, p, Mode::Parallel)
}
