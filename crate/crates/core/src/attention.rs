//! Sliding and dilated local attention over clamped `K × K` windows, and the
//! dual-branch adaptive multi-scale attention built from them.
//!
//! Attention runs on a token layout `[N, G, H·W, head_dim]`; the projections
//! stay as 1×1 convolutions on `[N, C, H, W]`.

use std::rc::Rc;

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{concat_channels, conv2d, slice_channels, Conv2dSpec};
use crate::tensor::Tensor;

const INVALID: usize = usize::MAX;

/// `(max(1, ⌊H/K⌋), max(1, ⌊W/K⌋))`.
pub fn adaptive_dilation(h: usize, w: usize, k: usize) -> (usize, usize) {
    ((h / k.max(1)).max(1), (w / k.max(1)).max(1))
}

/// Source coordinates of every query's window.
///
/// Windows are separable: the row list of a query depends only on its row and
/// the column list only on its column. Slot `ki·K + kj` reads
/// `(rows[ki], cols[kj])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    h: usize,
    w: usize,
    k: usize,
    dilation: (usize, usize),
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Per-position source lists along one axis, `len × k`, `INVALID` padded.
fn axis_slots(len: usize, k: usize, d: usize) -> Vec<usize> {
    let mut out = vec![INVALID; len * k];
    for i in 0..len {
        let coset = i % d;
        let m = (len - coset).div_ceil(d);
        let a = i / d;
        let (start, count) = if m >= k {
            (a.saturating_sub(k / 2).min(m - k), k)
        } else {
            (0, m)
        };
        for s in 0..count {
            out[i * k + s] = coset + (start + s) * d;
        }
    }
    out
}

impl WindowIndex {
    pub fn new(h: usize, w: usize, k: usize, dilation: (usize, usize)) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::contract(
                "build_window_index",
                format!("window size must be odd, got {k}"),
            ));
        }
        if h == 0 || w == 0 {
            return Err(Error::contract("build_window_index", "empty feature map"));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::contract(
                "build_window_index",
                "dilation must be positive",
            ));
        }
        Ok(WindowIndex {
            h,
            w,
            k,
            dilation,
            rows: axis_slots(h, k, dilation.0),
            cols: axis_slots(w, k, dilation.1),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dilation(&self) -> (usize, usize) {
        self.dilation
    }

    pub fn slots(&self) -> usize {
        self.k * self.k
    }

    /// Source `(row, col)` of slot `s` of the query at `(i, j)`.
    pub fn source(&self, i: usize, j: usize, s: usize) -> Option<(usize, usize)> {
        let r = self.rows[i * self.k + s / self.k];
        let c = self.cols[j * self.k + s % self.k];
        (r != INVALID && c != INVALID).then_some((r, c))
    }

    /// All `K²` slots of one query.
    pub fn window(&self, i: usize, j: usize) -> Vec<Option<(usize, usize)>> {
        (0..self.slots()).map(|s| self.source(i, j, s)).collect()
    }

    pub fn valid_count(&self, i: usize, j: usize) -> usize {
        let k = self.k;
        let r = self.rows[i * k..(i + 1) * k]
            .iter()
            .filter(|&&v| v != INVALID)
            .count();
        let c = self.cols[j * k..(j + 1) * k]
            .iter()
            .filter(|&&v| v != INVALID)
            .count();
        r * c
    }

    /// `[H, W, K²]` of `{0, 1}`.
    pub fn mask(&self) -> Tensor {
        let kk = self.slots();
        Tensor::from_fn(&[self.h, self.w, kk], |f| {
            let (p, s) = (f / kk, f % kk);
            f64::from(u8::from(self.source(p / self.w, p % self.w, s).is_some()))
        })
    }

    fn row_slots(&self, i: usize) -> &[usize] {
        &self.rows[i * self.k..(i + 1) * self.k]
    }

    fn col_slots(&self, j: usize) -> &[usize] {
        &self.cols[j * self.k..(j + 1) * self.k]
    }
}

pub fn build_window_index(
    h: usize,
    w: usize,
    k: usize,
    dilation: (usize, usize),
) -> Result<WindowIndex> {
    WindowIndex::new(h, w, k, dilation)
}

/// Softmax weights of one attention branch, `[N, heads, H, W, K²]`, with the
/// window geometry they were computed on. The weights stay on the tape so a
/// consumer's gradient reaches the logits.
#[derive(Debug, Clone)]
pub struct AttentionMaps<'t> {
    pub weights: Var<'t>,
    pub index: Rc<WindowIndex>,
}

impl<'t> AttentionMaps<'t> {
    pub fn heads(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Validity mask broadcast to the weights' shape.
    pub fn mask(&self) -> Tensor {
        let m = self.index.mask();
        let per = m.numel();
        Tensor::from_fn(self.weights.shape(), |f| m.data()[f % per])
    }

    pub(crate) fn check_geometry(
        &self,
        op: &'static str,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<()> {
        let s = self.weights.shape();
        let idx = &self.index;
        if s.len() != 5
            || s[0] != n
            || s[2] != h
            || s[3] != w
            || s[4] != idx.slots()
            || idx.h != h
            || idx.w != w
        {
            return Err(Error::contract(
                op,
                format!(
                    "maps {s:?} (K={}, dilation {:?}) do not fit a {n}×·×{h}×{w} input",
                    idx.k, idx.dilation
                ),
            ));
        }
        Ok(())
    }
}

/// `[N, G·hd, H, W] → [N, G, H·W, hd]`.
fn to_tokens(x: &[f64], n: usize, g: usize, hd: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n * g {
        for d in 0..hd {
            let src = &x[(b * hd + d) * hw..(b * hd + d + 1) * hw];
            let dst = &mut out[b * hw * hd..(b + 1) * hw * hd];
            for (p, &v) in src.iter().enumerate() {
                dst[p * hd + d] = v;
            }
        }
    }
    out
}

fn from_tokens(t: &[f64], n: usize, g: usize, hd: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for b in 0..n * g {
        let src = &t[b * hw * hd..(b + 1) * hw * hd];
        for d in 0..hd {
            let dst = &mut out[(b * hd + d) * hw..(b * hd + d + 1) * hw];
            for (p, o) in dst.iter_mut().enumerate() {
                *o = src[p * hd + d];
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Visits the valid slots of the query at `(i, j)` as `(slot, source token)`.
#[inline]
fn for_each_slot(idx: &WindowIndex, i: usize, j: usize, mut f: impl FnMut(usize, usize)) {
    let k = idx.k;
    for (ki, &r) in idx.row_slots(i).iter().enumerate() {
        if r == INVALID {
            continue;
        }
        for (kj, &c) in idx.col_slots(j).iter().enumerate() {
            if c != INVALID {
                f(ki * k + kj, r * idx.w + c);
            }
        }
    }
}

/// Masked softmax of scaled window logits for one `(n, head)` block.
fn weights_block(q: &[f64], k: &[f64], hd: usize, idx: &WindowIndex, scale: f64, out: &mut [f64]) {
    let kk = idx.slots();
    for i in 0..idx.h {
        for j in 0..idx.w {
            let p = i * idx.w + j;
            let qp = &q[p * hd..(p + 1) * hd];
            let row = &mut out[p * kk..(p + 1) * kk];
            row.fill(f64::NEG_INFINITY);
            let mut m = f64::NEG_INFINITY;
            for_each_slot(idx, i, j, |s, src| {
                let l = dot(qp, &k[src * hd..(src + 1) * hd]) * scale;
                row[s] = l;
                m = m.max(l);
            });
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*v - m).exp()
                };
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn weights_block_backward(
    q: &[f64],
    k: &[f64],
    a: &[f64],
    ga: &[f64],
    hd: usize,
    idx: &WindowIndex,
    scale: f64,
    dq: &mut [f64],
    dk: &mut [f64],
) {
    let kk = idx.slots();
    for i in 0..idx.h {
        for j in 0..idx.w {
            let p = i * idx.w + j;
            let (ar, gr) = (&a[p * kk..(p + 1) * kk], &ga[p * kk..(p + 1) * kk]);
            let mean = dot(ar, gr);
            for_each_slot(idx, i, j, |s, src| {
                let dl = ar[s] * (gr[s] - mean) * scale;
                if dl != 0.0 {
                    axpy(
                        dl,
                        &k[src * hd..(src + 1) * hd],
                        &mut dq[p * hd..(p + 1) * hd],
                    );
                    axpy(
                        dl,
                        &q[p * hd..(p + 1) * hd],
                        &mut dk[src * hd..(src + 1) * hd],
                    );
                }
            });
        }
    }
}

fn aggregate_block(a: &[f64], v: &[f64], hd: usize, idx: &WindowIndex, out: &mut [f64]) {
    let kk = idx.slots();
    for i in 0..idx.h {
        for j in 0..idx.w {
            let p = i * idx.w + j;
            let ar = &a[p * kk..(p + 1) * kk];
            let op = &mut out[p * hd..(p + 1) * hd];
            for_each_slot(idx, i, j, |s, src| {
                axpy(ar[s], &v[src * hd..(src + 1) * hd], op)
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn aggregate_block_backward(
    a: &[f64],
    v: &[f64],
    g: &[f64],
    hd: usize,
    idx: &WindowIndex,
    da: Option<&mut [f64]>,
    dv: Option<&mut [f64]>,
) {
    let kk = idx.slots();
    let (mut da, mut dv) = (da, dv);
    for i in 0..idx.h {
        for j in 0..idx.w {
            let p = i * idx.w + j;
            let gp = &g[p * hd..(p + 1) * hd];
            for_each_slot(idx, i, j, |s, src| {
                if let Some(da) = da.as_deref_mut() {
                    da[p * kk + s] = dot(gp, &v[src * hd..(src + 1) * hd]);
                }
                if let Some(dv) = dv.as_deref_mut() {
                    axpy(a[p * kk + s], gp, &mut dv[src * hd..(src + 1) * hd]);
                }
            });
        }
    }
}

fn split_heads(
    op: &'static str,
    shape: &[usize],
    heads: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::dim(
            op,
            "rank",
            format!("expected [N,C,H,W], got {shape:?}"),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(
            "heads",
            format!("{c} channels do not split into {heads} heads"),
        ));
    }
    Ok((n, c, h, w, c / heads))
}

/// Window softmax weights from query and key maps `[N, heads·hd, H, W]`.
/// Logits are `q·k / √hd`; slots outside the map are masked.
pub fn attention_weights<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    heads: usize,
    index: Rc<WindowIndex>,
) -> Result<AttentionMaps<'t>> {
    crate::ops::same_tape("attention_weights", q, k)?;
    let (n, _, h, w, hd) = split_heads("attention_weights", q.shape(), heads)?;
    if k.shape() != q.shape() {
        return Err(Error::dim(
            "attention_weights",
            "k",
            format!("{:?} vs q {:?}", k.shape(), q.shape()),
        ));
    }
    if (index.h, index.w) != (h, w) {
        return Err(Error::contract(
            "attention_weights",
            "window index built for another resolution",
        ));
    }
    let hw = h * w;
    let kk = index.slots();
    let scale = 1.0 / (hd as f64).sqrt();
    let qt = to_tokens(q.value().data(), n, heads, hd, hw);
    let kt = to_tokens(k.value().data(), n, heads, hd, hw);
    let mut a = vec![0.0; n * heads * hw * kk];
    let idx: &WindowIndex = &index;
    a.par_chunks_mut(hw * kk).enumerate().for_each(|(b, out)| {
        let tok = b * hw * hd..(b + 1) * hw * hd;
        weights_block(&qt[tok.clone()], &kt[tok], hd, idx, scale, out);
    });
    let weights = Tensor::from_parts(vec![n, heads, h, w, kk], a);
    let saved = weights.clone();
    let idx = Rc::clone(&index);
    let var = q.tape().record(weights, &[q, k], move |g, needs| {
        let mut dq = vec![0.0; qt.len()];
        let mut dk = vec![0.0; kt.len()];
        let idx: &WindowIndex = &idx;
        dq.par_chunks_mut(hw * hd)
            .zip(dk.par_chunks_mut(hw * hd))
            .enumerate()
            .for_each(|(b, (dq, dk))| {
                let tok = b * hw * hd..(b + 1) * hw * hd;
                let maps = b * hw * kk..(b + 1) * hw * kk;
                weights_block_backward(
                    &qt[tok.clone()],
                    &kt[tok],
                    &saved.data()[maps.clone()],
                    &g.data()[maps],
                    hd,
                    idx,
                    scale,
                    dq,
                    dk,
                );
            });
        let shape = vec![n, heads * hd, h, w];
        vec![
            needs[0].then(|| Tensor::from_parts(shape.clone(), from_tokens(&dq, n, heads, hd, hw))),
            needs[1].then(|| Tensor::from_parts(shape.clone(), from_tokens(&dk, n, heads, hd, hw))),
        ]
    });
    Ok(AttentionMaps {
        weights: var,
        index,
    })
}

/// `out[p] = Σ_s maps[p, s] · v[window(p)[s]]`, head by head; `v` is
/// `[N, heads·hd, H, W]` with head `g` owning channels `g·hd .. (g+1)·hd`.
pub fn window_aggregate<'t>(maps: &AttentionMaps<'t>, v: &Var<'t>) -> Result<Var<'t>> {
    crate::ops::same_tape("window_aggregate", &maps.weights, v)?;
    let heads = maps.heads();
    let (n, _, h, w, hd) = split_heads("window_aggregate", v.shape(), heads)?;
    maps.check_geometry("window_aggregate", n, h, w)?;
    let hw = h * w;
    let kk = maps.index.slots();
    let vt = to_tokens(v.value().data(), n, heads, hd, hw);
    let mut out = vec![0.0; vt.len()];
    let a = maps.weights.shared();
    let idx = Rc::clone(&maps.index);
    {
        let (ad, idx): (&[f64], &WindowIndex) = (a.data(), &idx);
        out.par_chunks_mut(hw * hd).enumerate().for_each(|(b, o)| {
            aggregate_block(
                &ad[b * hw * kk..(b + 1) * hw * kk],
                &vt[b * hw * hd..(b + 1) * hw * hd],
                hd,
                idx,
                o,
            );
        });
    }
    let shape = v.shape().to_vec();
    let value = Tensor::from_parts(shape.clone(), from_tokens(&out, n, heads, hd, hw));
    Ok(v.tape()
        .record(value, &[&maps.weights, v], move |g, needs| {
            let gt = to_tokens(g.data(), n, heads, hd, hw);
            let mut da = needs[0].then(|| vec![0.0; a.numel()]);
            let mut dv = needs[1].then(|| vec![0.0; vt.len()]);
            let idx: &WindowIndex = &idx;
            let ad: &[f64] = a.data();
            let blocks = n * heads;
            let da_chunks: Vec<Option<&mut [f64]>> = match da.as_mut() {
                Some(d) => d.chunks_mut(hw * kk).map(Some).collect(),
                None => (0..blocks).map(|_| None).collect(),
            };
            let dv_chunks: Vec<Option<&mut [f64]>> = match dv.as_mut() {
                Some(d) => d.chunks_mut(hw * hd).map(Some).collect(),
                None => (0..blocks).map(|_| None).collect(),
            };
            da_chunks
                .into_par_iter()
                .zip(dv_chunks)
                .enumerate()
                .for_each(|(b, (da, dv))| {
                    aggregate_block_backward(
                        &ad[b * hw * kk..(b + 1) * hw * kk],
                        &vt[b * hw * hd..(b + 1) * hw * hd],
                        &gt[b * hw * hd..(b + 1) * hw * hd],
                        hd,
                        idx,
                        da,
                        dv,
                    );
                });
            vec![
                da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                dv.map(|d| Tensor::from_parts(shape.clone(), from_tokens(&d, n, heads, hd, hw))),
            ]
        }))
}

/// Output of attention without materializing the maps: a running-max
/// softmax over each window. Forward only.
fn attend_streaming(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, idx: &WindowIndex) -> Tensor {
    let s = q.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hd, hw) = (c / heads, h * w);
    let scale = 1.0 / (hd as f64).sqrt();
    let qt = to_tokens(q.data(), n, heads, hd, hw);
    let kt = to_tokens(k.data(), n, heads, hd, hw);
    let vt = to_tokens(v.data(), n, heads, hd, hw);
    let mut out = vec![0.0; qt.len()];
    out.par_chunks_mut(hw * hd).enumerate().for_each(|(b, o)| {
        let tok = b * hw * hd..(b + 1) * hw * hd;
        let (qb, kb, vb) = (&qt[tok.clone()], &kt[tok.clone()], &vt[tok]);
        let mut logits = Vec::with_capacity(idx.slots());
        let mut srcs = Vec::with_capacity(idx.slots());
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let qp = &qb[p * hd..(p + 1) * hd];
                logits.clear();
                srcs.clear();
                for_each_slot(idx, i, j, |_, src| {
                    logits.push(dot(qp, &kb[src * hd..(src + 1) * hd]) * scale);
                    srcs.push(src);
                });
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                let op = &mut o[p * hd..(p + 1) * hd];
                for (&l, &src) in logits.iter().zip(&srcs) {
                    let e = (l - m).exp();
                    z += e;
                    axpy(e, &vb[src * hd..(src + 1) * hd], op);
                }
                for x in op.iter_mut() {
                    *x /= z;
                }
            }
        }
    });
    Tensor::from_parts(s.to_vec(), from_tokens(&out, n, heads, hd, hw))
}

/// Projections of one attention branch: 1×1 convolutions `[C, C, 1, 1]` with
/// optional biases `[C]`. A key bias would shift every logit of a query by
/// the same amount and cancel in the softmax, so keys carry none.
#[derive(Debug, Clone)]
pub struct AttentionParams<'t> {
    pub wq: Var<'t>,
    pub bq: Option<Var<'t>>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Option<Var<'t>>,
    pub wo: Var<'t>,
    pub bo: Option<Var<'t>>,
}

fn project<'t>(x: &Var<'t>, w: &Var<'t>, b: &Option<Var<'t>>) -> Result<Var<'t>> {
    conv2d(x, w, b.as_ref(), Conv2dSpec::pointwise())
}

/// Multi-head attention of every position over its clamped `K × K` window at
/// the given dilation. Returns the output projection and the maps.
pub fn windowed_attention<'t>(
    x: &Var<'t>,
    params: &AttentionParams<'t>,
    heads: usize,
    k: usize,
    dilation: (usize, usize),
) -> Result<(Var<'t>, AttentionMaps<'t>)> {
    let (_, _, h, w, _) = split_heads("windowed_attention", x.shape(), heads)?;
    let index = Rc::new(WindowIndex::new(h, w, k, dilation)?);
    let q = project(x, &params.wq, &params.bq)?;
    let kv = project(x, &params.wk, &None)?;
    let v = project(x, &params.wv, &params.bv)?;
    let maps = attention_weights(&q, &kv, heads, index)?;
    let o = window_aggregate(&maps, &v)?;
    Ok((project(&o, &params.wo, &params.bo)?, maps))
}

/// Same output as [`windowed_attention`]. When the tape is not recording, the
/// maps are never materialized, so memory stays linear in `H·W` even when the
/// window covers the whole map.
pub fn windowed_attention_output<'t>(
    x: &Var<'t>,
    params: &AttentionParams<'t>,
    heads: usize,
    k: usize,
    dilation: (usize, usize),
) -> Result<Var<'t>> {
    if x.tape().is_recording() {
        return Ok(windowed_attention(x, params, heads, k, dilation)?.0);
    }
    let (_, _, h, w, _) = split_heads("windowed_attention", x.shape(), heads)?;
    let index = WindowIndex::new(h, w, k, dilation)?;
    let q = project(x, &params.wq, &params.bq)?;
    let kv = project(x, &params.wk, &None)?;
    let v = project(x, &params.wv, &params.bv)?;
    let o = x.tape().constant(attend_streaming(
        q.value(),
        kv.value(),
        v.value(),
        heads,
        &index,
    ));
    drop((q, kv, v));
    project(&o, &params.wo, &params.bo)
}

/// Channel-split dual-branch attention: the first half of the channels (and
/// heads) attends over dense windows, the second half over windows dilated to
/// span the map. Returns the concatenated output and both sets of maps.
pub fn ama_forward<'t>(
    x: &Var<'t>,
    sla: &AttentionParams<'t>,
    dla: &AttentionParams<'t>,
    heads_total: usize,
    k: usize,
) -> Result<(Var<'t>, AttentionMaps<'t>, AttentionMaps<'t>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "ama_forward",
            "rank",
            format!("expected [N,C,H,W], got {s:?}"),
        ));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    if c % 2 != 0 {
        return Err(Error::config(
            "channels",
            format!("{c} is odd; the branch split needs an even count"),
        ));
    }
    if !heads_total.is_multiple_of(2) {
        return Err(Error::config(
            "heads",
            format!("{heads_total} is odd; the branch split needs an even count"),
        ));
    }
    let x1 = slice_channels(x, 0, c / 2)?;
    let x2 = slice_channels(x, c / 2, c / 2)?;
    let (y1, a1) = windowed_attention(&x1, sla, heads_total / 2, k, (1, 1))?;
    let (y2, a2) = windowed_attention(&x2, dla, heads_total / 2, k, adaptive_dilation(h, w, k))?;
    Ok((concat_channels(&[&y1, &y2])?, a1, a2))
}
