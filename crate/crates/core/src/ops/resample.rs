use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn nchw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if s.len() != 4 {
        return Err(Error::dim(
            op,
            "rank",
            format!("expected [N,C,H,W], got {s:?}"),
        ));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Index map of pixel unshuffle: for every output element, the flat input
/// element it copies.
fn unshuffle_index(n: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h / r, w / r);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for i in 0..ho {
                        for j in 0..wo {
                            idx.push(((b * c + ch) * h + i * r + dy) * w + j * r + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[N, C, H, W] → [N, C·r², H/r, W/r]`; output channel `c·r² + dy·r + dx`
/// holds the pixels at offset `(dy, dx)` of every `r × r` block.
pub fn pixel_unshuffle<'t>(x: &Var<'t>, r: usize) -> Result<Var<'t>> {
    let (n, c, h, w) = nchw("pixel_unshuffle", x.shape())?;
    if r == 0 {
        return Err(Error::contract(
            "pixel_unshuffle",
            "factor must be positive",
        ));
    }
    if h % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            "H",
            format!("{h} not divisible by {r}"),
        ));
    }
    if w % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            "W",
            format!("{w} not divisible by {r}"),
        ));
    }
    let idx = unshuffle_index(n, c, h, w, r);
    let xd = x.value().data();
    let out = Tensor::from_parts(
        vec![n, c * r * r, h / r, w / r],
        idx.iter().map(|&i| xd[i]).collect(),
    );
    let in_shape = x.shape().to_vec();
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut d = vec![0.0; g.numel()];
        for (o, &i) in idx.iter().enumerate() {
            d[i] = g.data()[o];
        }
        vec![Some(Tensor::from_parts(in_shape.clone(), d))]
    }))
}

/// Inverse of [`pixel_unshuffle`]: `[N, C·r², H, W] → [N, C, H·r, W·r]`.
pub fn pixel_shuffle<'t>(x: &Var<'t>, r: usize) -> Result<Var<'t>> {
    let (n, cr, h, w) = nchw("pixel_shuffle", x.shape())?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            "C",
            format!("{cr} not divisible by {r}²"),
        ));
    }
    let c = cr / (r * r);
    let idx = unshuffle_index(n, c, h * r, w * r, r);
    let xd = x.value().data();
    let mut out = vec![0.0; xd.len()];
    for (o, &i) in idx.iter().enumerate() {
        out[i] = xd[o];
    }
    let in_shape = x.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_parts(vec![n, c, h * r, w * r], out),
        &[x],
        move |g, _| {
            let d = idx.iter().map(|&i| g.data()[i]).collect();
            vec![Some(Tensor::from_parts(in_shape.clone(), d))]
        },
    ))
}

/// Source taps `(i0, i1, λ)` for one output axis, half-pixel centers
/// (`align_corners = false`).
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear interpolation to `out_h × out_w` with half-pixel centers.
pub fn bilinear_resize<'t>(x: &Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let (n, c, h, w) = nchw("bilinear_resize", x.shape())?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim(
            "bilinear_resize",
            "size",
            "sizes must be positive",
        ));
    }
    if (out_h, out_w) == (h, w) {
        let out = x.value().clone();
        return Ok(x.tape().record(out, &[x], |g, _| vec![Some(g.clone())]));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let xd = x.value().data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    let in_shape = x.shape().to_vec();
    Ok(x.tape().record(
        Tensor::from_parts(vec![n, c, out_h, out_w], out),
        &[x],
        move |g, _| {
            let mut d = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let gs = &g.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let ds = &mut d[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let gv = gs[oy * out_w + ox];
                        ds[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                        ds[y0 * w + x1] += gv * (1.0 - ly) * lx;
                        ds[y1 * w + x0] += gv * ly * (1.0 - lx);
                        ds[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), d))]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::rng::SeededRng;

    #[test]
    fn unshuffle_block_raster_order() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_unshuffle(&x, 1).unwrap().value(), x.value());
    }

    #[test]
    fn unshuffle_rejects_indivisible() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 6]));
        match pixel_unshuffle(&x, 4) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "W"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shuffle_inverts_unshuffle_exactly() {
        let mut rng = SeededRng::new(5);
        let tape = Tape::no_grad();
        let x = tape.constant(rng.normal_tensor(&[2, 3, 4, 6], 1.0));
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 12, 2, 3]);
        let back = pixel_shuffle(&y, 2).unwrap();
        assert_eq!(back.value(), x.value());
        let mut a = x.value().data().to_vec();
        let mut b = y.value().data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = SeededRng::new(6);
        let tape = Tape::no_grad();
        let x = tape.constant(rng.normal_tensor(&[1, 2, 3, 5], 1.0));
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap().value(), x.value());
        let c = tape.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let y = bilinear_resize(&c, 7, 4).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn bilinear_upsample_matches_hand_interpolation() {
        let tape = Tape::no_grad();
        let (a, b, c, d) = (1.0, 2.0, 5.0, -3.0);
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![a, b, c, d]).unwrap());
        let y = bilinear_resize(&x, 4, 4).unwrap();
        // Output pixel o samples source coordinate (o + 0.5)/2 − 0.5, clamped:
        // o = 0 → 0, 1 → 0.25, 2 → 0.75, 3 → 1.25 → clamp to the last pixel.
        let coord = [0.0, 0.25, 0.75, 1.0];
        let src = [[a, b], [c, d]];
        for oy in 0..4 {
            for ox in 0..4 {
                let (sy, sx): (f64, f64) = (coord[oy], coord[ox]);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
                let want = src[y0][x0] * (1.0 - ly) * (1.0 - lx)
                    + src[y0][x1] * (1.0 - ly) * lx
                    + src[y1][x0] * ly * (1.0 - lx)
                    + src[y1][x1] * ly * lx;
                assert!((y.value().at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
            }
        }
        assert_eq!(y.value().at(&[0, 0, 0, 0]), a);
        assert_eq!(y.value().at(&[0, 0, 3, 3]), d);
    }
}
