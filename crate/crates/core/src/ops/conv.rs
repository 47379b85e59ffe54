use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn pointwise() -> Self {
        Self::default()
    }

    /// `k × k` kernel, stride 1, "same" zero padding, one group per channel.
    pub fn depthwise(channels: usize, k: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (dilation * (k - 1) / 2, dilation * (k - 1) / 2),
            dilation: (dilation, dilation),
            groups: channels,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            padding: ((k - 1) / 2, (k - 1) / 2),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    /// Output index range along one axis whose tap lands inside the input.
    fn valid_range(
        out_len: usize,
        in_len: usize,
        stride: usize,
        pad: usize,
        tap: usize,
    ) -> (usize, usize) {
        // in = o·stride + tap − pad must lie in [0, in_len)
        let lo = if tap >= pad {
            0
        } else {
            (pad - tap).div_ceil(stride)
        };
        let hi = if in_len + pad > tap {
            ((in_len + pad - tap - 1) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn geometry(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    const OP: &str = "conv2d";
    if input.len() != 4 {
        return Err(Error::dim(
            OP,
            "input rank",
            format!("expected [N,C,H,W], got {input:?}"),
        ));
    }
    if weight.len() != 4 {
        return Err(Error::dim(
            OP,
            "weight rank",
            format!("expected [Cout,Cin/g,kh,kw], got {weight:?}"),
        ));
    }
    let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 {
        return Err(Error::dim(
            OP,
            "Cin",
            format!("{cin} input channels not divisible by {g} groups"),
        ));
    }
    if cout % g != 0 {
        return Err(Error::dim(
            OP,
            "Cout",
            format!("{cout} output channels not divisible by {g} groups"),
        ));
    }
    if cin_g != cin / g {
        return Err(Error::dim(
            OP,
            "Cin",
            format!(
                "weight expects {cin_g} channels per group, input has {}",
                cin / g
            ),
        ));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
        return Err(Error::dim(OP, "stride/dilation", "must be positive"));
    }
    let span_h = spec.dilation.0 * (kh.max(1) - 1) + 1;
    let span_w = spec.dilation.1 * (kw.max(1) - 1) + 1;
    if kh == 0 || h + 2 * spec.padding.0 < span_h {
        return Err(Error::dim(
            OP,
            "H",
            format!(
                "kernel extent {span_h} exceeds padded height {}",
                h + 2 * spec.padding.0
            ),
        ));
    }
    if kw == 0 || w + 2 * spec.padding.1 < span_w {
        return Err(Error::dim(
            OP,
            "W",
            format!(
                "kernel extent {span_w} exceeds padded width {}",
                w + 2 * spec.padding.1
            ),
        ));
    }
    let ho = (h + 2 * spec.padding.0 - span_h) / spec.stride.0 + 1;
    let wo = (w + 2 * spec.padding.1 - span_w) / spec.stride.1 + 1;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        spec,
    })
}

/// Unfolds one group of one image into a `[cin_g·kh·kw, ho·wo]` matrix.
fn im2col(x: &[f64], geo: &Geometry, col: &mut [f64]) {
    let s = geo.spec;
    let p = geo.ho * geo.wo;
    col.fill(0.0);
    for ci in 0..geo.cin_g() {
        let plane = &x[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy0, oy1) =
                Geometry::valid_range(geo.ho, geo.h, s.stride.0, s.padding.0, ky * s.dilation.0);
            for kx in 0..geo.kw {
                let (ox0, ox1) = Geometry::valid_range(
                    geo.wo,
                    geo.w,
                    s.stride.1,
                    s.padding.1,
                    kx * s.dilation.1,
                );
                let row = &mut col[((ci * geo.kh + ky) * geo.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * s.stride.0 + ky * s.dilation.0 - s.padding.0;
                    for ox in ox0..ox1 {
                        let ix = ox * s.stride.1 + kx * s.dilation.1 - s.padding.1;
                        row[oy * geo.wo + ox] = plane[iy * geo.w + ix];
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into one group of one image.
fn col2im(col: &[f64], geo: &Geometry, dx: &mut [f64]) {
    let s = geo.spec;
    let p = geo.ho * geo.wo;
    for ci in 0..geo.cin_g() {
        let plane = &mut dx[ci * geo.h * geo.w..(ci + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            let (oy0, oy1) =
                Geometry::valid_range(geo.ho, geo.h, s.stride.0, s.padding.0, ky * s.dilation.0);
            for kx in 0..geo.kw {
                let (ox0, ox1) = Geometry::valid_range(
                    geo.wo,
                    geo.w,
                    s.stride.1,
                    s.padding.1,
                    kx * s.dilation.1,
                );
                let row = &col[((ci * geo.kh + ky) * geo.kw + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * s.stride.0 + ky * s.dilation.0 - s.padding.0;
                    for ox in ox0..ox1 {
                        let ix = ox * s.stride.1 + kx * s.dilation.1 - s.padding.1;
                        plane[iy * geo.w + ix] += row[oy * geo.wo + ox];
                    }
                }
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for every valid tap of one kernel offset.
#[inline]
fn for_each_tap(geo: &Geometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let s = geo.spec;
    let (oy0, oy1) =
        Geometry::valid_range(geo.ho, geo.h, s.stride.0, s.padding.0, ky * s.dilation.0);
    let (ox0, ox1) =
        Geometry::valid_range(geo.wo, geo.w, s.stride.1, s.padding.1, kx * s.dilation.1);
    for oy in oy0..oy1 {
        let iy = oy * s.stride.0 + ky * s.dilation.0 - s.padding.0;
        for ox in ox0..ox1 {
            let ix = ox * s.stride.1 + kx * s.dilation.1 - s.padding.1;
            f(oy * geo.wo + ox, iy * geo.w + ix);
        }
    }
}

fn forward(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, geo: &Geometry) -> Tensor {
    let (cin_g, cout_g, groups) = (geo.cin_g(), geo.cout_g(), geo.spec.groups);
    let hw = geo.h * geo.w;
    let p = geo.ho * geo.wo;
    let kk = geo.kh * geo.kw;
    let mut out = vec![0.0; geo.n * geo.cout * p];
    let mut col = if cin_g > 1 && !geo.is_plain_pointwise() {
        vec![0.0; cin_g * kk * p]
    } else {
        Vec::new()
    };
    for b in 0..geo.n {
        for g in 0..groups {
            let xin = &x.data()[(b * geo.cin + g * cin_g) * hw..][..cin_g * hw];
            let o = &mut out[(b * geo.cout + g * cout_g) * p..][..cout_g * p];
            let wg = &wt.data()[g * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
            if cin_g == 1 {
                for co in 0..cout_g {
                    let orow = &mut o[co * p..(co + 1) * p];
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            let wv = wg[co * kk + ky * geo.kw + kx];
                            for_each_tap(geo, ky, kx, |oi, ii| orow[oi] += wv * xin[ii]);
                        }
                    }
                }
            } else if geo.is_plain_pointwise() {
                gemm(
                    1.0,
                    MatRef::new(wg, cout_g, cin_g),
                    MatRef::new(xin, cin_g, p),
                    0.0,
                    o,
                );
            } else {
                im2col(xin, geo, &mut col);
                gemm(
                    1.0,
                    MatRef::new(wg, cout_g, cin_g * kk),
                    MatRef::new(&col, cin_g * kk, p),
                    0.0,
                    o,
                );
            }
        }
        if let Some(bias) = bias {
            for co in 0..geo.cout {
                let bv = bias.data()[co];
                for v in &mut out[(b * geo.cout + co) * p..][..p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_parts(vec![geo.n, geo.cout, geo.ho, geo.wo], out)
}

fn backward(
    x: &Tensor,
    wt: &Tensor,
    gout: &Tensor,
    geo: &Geometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (cin_g, cout_g, groups) = (geo.cin_g(), geo.cout_g(), geo.spec.groups);
    let hw = geo.h * geo.w;
    let p = geo.ho * geo.wo;
    let kk = geo.kh * geo.kw;
    let mut dx = need_x.then(|| vec![0.0; x.numel()]);
    let mut dw = need_w.then(|| vec![0.0; wt.numel()]);
    let mut col = if cin_g > 1 && !geo.is_plain_pointwise() {
        vec![0.0; cin_g * kk * p]
    } else {
        Vec::new()
    };
    for b in 0..geo.n {
        for g in 0..groups {
            let xin = &x.data()[(b * geo.cin + g * cin_g) * hw..][..cin_g * hw];
            let go = &gout.data()[(b * geo.cout + g * cout_g) * p..][..cout_g * p];
            let wg = &wt.data()[g * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
            let woff = g * cout_g * cin_g * kk;
            let xoff = (b * geo.cin + g * cin_g) * hw;
            if cin_g == 1 {
                for co in 0..cout_g {
                    let grow = &go[co * p..(co + 1) * p];
                    for ky in 0..geo.kh {
                        for kx in 0..geo.kw {
                            let widx = co * kk + ky * geo.kw + kx;
                            if let Some(dw) = dw.as_mut() {
                                let mut acc = 0.0;
                                for_each_tap(geo, ky, kx, |oi, ii| acc += grow[oi] * xin[ii]);
                                dw[woff + widx] += acc;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wv = wg[widx];
                                let dxs = &mut dx[xoff..xoff + hw];
                                for_each_tap(geo, ky, kx, |oi, ii| dxs[ii] += wv * grow[oi]);
                            }
                        }
                    }
                }
                continue;
            }
            let pointwise = geo.is_plain_pointwise();
            if let Some(dw) = dw.as_mut() {
                let colm = if pointwise {
                    MatRef::new(xin, cin_g, p)
                } else {
                    im2col(xin, geo, &mut col);
                    MatRef::new(&col, cin_g * kk, p)
                };
                gemm(
                    1.0,
                    MatRef::new(go, cout_g, p),
                    colm.t(),
                    1.0,
                    &mut dw[woff..woff + cout_g * cin_g * kk],
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wm = MatRef::new(wg, cout_g, cin_g * kk).t();
                if pointwise {
                    gemm(
                        1.0,
                        wm,
                        MatRef::new(go, cout_g, p),
                        1.0,
                        &mut dx[xoff..xoff + cin_g * hw],
                    );
                } else {
                    gemm(1.0, wm, MatRef::new(go, cout_g, p), 0.0, &mut col);
                    col2im(&col, geo, &mut dx[xoff..xoff + cin_g * hw]);
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
    )
}

/// 2-D cross-correlation with zero padding, stride, dilation and groups.
///
/// Output size per axis is `⌊(H + 2·pad − dilation·(k − 1) − 1) / stride⌋ + 1`.
pub fn conv2d<'t>(
    input: &Var<'t>,
    weight: &Var<'t>,
    bias: Option<&Var<'t>>,
    spec: Conv2dSpec,
) -> Result<Var<'t>> {
    super::same_tape("conv2d", input, weight)?;
    let geo = geometry(input.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        super::same_tape("conv2d", input, b)?;
        if b.shape() != [geo.cout] {
            return Err(Error::dim(
                "conv2d",
                "bias",
                format!("expected [{}], got {:?}", geo.cout, b.shape()),
            ));
        }
    }
    let out = forward(input.value(), weight.value(), bias.map(|b| b.value()), &geo);
    let (xv, wv) = (input.shared(), weight.shared());
    let backward_fn = move |g: &Tensor, needs: &[bool]| {
        let (dx, dw) = backward(&xv, &wv, g, &geo, needs[0], needs[1]);
        let mut grads = vec![dx, dw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let p = geo.ho * geo.wo;
                let mut db = vec![0.0; geo.cout];
                for b in 0..geo.n {
                    for (co, acc) in db.iter_mut().enumerate() {
                        *acc += g.data()[(b * geo.cout + co) * p..][..p].iter().sum::<f64>();
                    }
                }
                Tensor::from_parts(vec![geo.cout], db)
            }));
        }
        grads
    };
    Ok(match bias {
        Some(b) => input.tape().record(out, &[input, weight, b], backward_fn),
        None => input.tape().record(out, &[input, weight], backward_fn),
    })
}
