//! Attention-augmented SSM: the scan's hidden state map is re-aggregated with
//! attention maps computed elsewhere, gated by `C′` and given a `D`-weighted
//! residual.

use crate::attention::{window_aggregate, AttentionMaps};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{
    add, concat_channels, mul_broadcast_channels, mul_channels, reshape, slice_channels,
};
use crate::scan::{make_scan_params, scan_parallel, HiddenStateMap, ScanParams, ScanProjection};

/// Splits `s: [N, C, H, W]` into `maps.len()` equal channel groups and
/// aggregates group `i` over the windows of `maps[i]`.
pub fn aggregate_states_with<'t>(s: &Var<'t>, maps: &[&AttentionMaps<'t>]) -> Result<Var<'t>> {
    let shape = s.shape();
    if shape.len() != 4 {
        return Err(Error::dim(
            "aggregate_states",
            "rank",
            format!("expected [N,C,H,W], got {shape:?}"),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if maps.is_empty() || c % maps.len() != 0 {
        return Err(Error::contract(
            "aggregate_states",
            format!("{c} channels do not split across {} map sets", maps.len()),
        ));
    }
    let part = c / maps.len();
    let mut outs = Vec::with_capacity(maps.len());
    for (i, m) in maps.iter().enumerate() {
        m.check_geometry("aggregate_states", n, h, w)?;
        if !part.is_multiple_of(m.heads()) {
            return Err(Error::contract(
                "aggregate_states",
                format!("{part} channels do not split into {} heads", m.heads()),
            ));
        }
        let si = if maps.len() == 1 {
            s.clone()
        } else {
            slice_channels(s, i * part, part)?
        };
        outs.push(window_aggregate(m, &si)?);
    }
    if outs.len() == 1 {
        return Ok(outs.pop().expect("one group"));
    }
    concat_channels(&outs.iter().collect::<Vec<_>>())
}

/// First channel half over the dense windows, second half over the dilated
/// ones.
pub fn aggregate_states<'t>(
    s: &Var<'t>,
    maps_sla: &AttentionMaps<'t>,
    maps_dla: &AttentionMaps<'t>,
) -> Result<Var<'t>> {
    aggregate_states_with(s, &[maps_sla, maps_dla])
}

/// Intermediate values of one pass, kept for inspection.
#[derive(Debug, Clone)]
pub struct A2ssmTrace<'t> {
    pub params: ScanParams<'t>,
    pub states: HiddenStateMap<'t>,
    pub aggregated: Var<'t>,
    pub out: Var<'t>,
}

fn scan_states<'t>(
    y: &Var<'t>,
    proj: &ScanProjection<'t>,
) -> Result<(ScanParams<'t>, HiddenStateMap<'t>)> {
    let p = make_scan_params(y, proj)?;
    let s = y.shape();
    let u = reshape(y, &[s[0], s[1], s[2] * s[3]])?;
    let states = scan_parallel(&u, &p)?;
    Ok((p, states))
}

/// `out = C′ ⊙ agg(S) + D ⊙ Y`.
fn gate_and_residual<'t>(y: &Var<'t>, p: &ScanParams<'t>, agg: &Var<'t>) -> Result<Var<'t>> {
    let s = y.shape();
    let cp = reshape(&p.cprime, &[s[0], 1, s[2], s[3]])?;
    add(&mul_broadcast_channels(agg, &cp)?, &mul_channels(y, &p.d)?)
}

pub fn a2ssm_trace<'t>(
    y: &Var<'t>,
    maps: &[&AttentionMaps<'t>],
    proj: &ScanProjection<'t>,
) -> Result<A2ssmTrace<'t>> {
    let (params, states) = scan_states(y, proj)?;
    let s4 = reshape(&states.s, y.shape())?;
    let aggregated = aggregate_states_with(&s4, maps)?;
    let out = gate_and_residual(y, &params, &aggregated)?;
    Ok(A2ssmTrace {
        params,
        states,
        aggregated,
        out,
    })
}

/// Scan → aggregate with the given maps → `⊙ C′` → `+ D ⊙ Y`.
pub fn a2ssm_forward_with<'t>(
    y: &Var<'t>,
    maps: &[&AttentionMaps<'t>],
    proj: &ScanProjection<'t>,
) -> Result<Var<'t>> {
    Ok(a2ssm_trace(y, maps, proj)?.out)
}

pub fn a2ssm_forward<'t>(
    y: &Var<'t>,
    maps_sla: &AttentionMaps<'t>,
    maps_dla: &AttentionMaps<'t>,
    proj: &ScanProjection<'t>,
) -> Result<Var<'t>> {
    a2ssm_forward_with(y, &[maps_sla, maps_dla], proj)
}

/// The plain selective scan without re-aggregation: `C′ ⊙ S + D ⊙ Y`.
pub fn vanilla_ssm_forward<'t>(y: &Var<'t>, proj: &ScanProjection<'t>) -> Result<Var<'t>> {
    let (params, states) = scan_states(y, proj)?;
    let s4 = reshape(&states.s, y.shape())?;
    gate_and_residual(y, &params, &s4)
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use super::*;
    use crate::attention::{adaptive_dilation, WindowIndex};
    use crate::autograd::Tape;
    use crate::fdcheck::{check, Coverage};
    use crate::rng::SeededRng;
    use crate::scan::scan_parallel;
    use crate::tensor::Tensor;

    fn maps_from<'t>(tape: &'t Tape, weights: Tensor, index: WindowIndex) -> AttentionMaps<'t> {
        AttentionMaps {
            weights: tape.constant(weights),
            index: Rc::new(index),
        }
    }

    fn one_hot(n: usize, heads: usize, idx: &WindowIndex) -> Tensor {
        let (h, w, kk) = (idx.height(), idx.width(), idx.slots());
        Tensor::from_fn(&[n, heads, h, w, kk], |f| {
            let (s, p) = (f % kk, (f / kk) % (h * w));
            let (i, j) = (p / w, p % w);
            f64::from(u8::from(idx.source(i, j, s) == Some((i, j))))
        })
    }

    fn uniform(n: usize, heads: usize, idx: &WindowIndex) -> Tensor {
        let (h, w, kk) = (idx.height(), idx.width(), idx.slots());
        Tensor::from_fn(&[n, heads, h, w, kk], |f| {
            let (s, p) = (f % kk, (f / kk) % (h * w));
            let (i, j) = (p / w, p % w);
            if idx.source(i, j, s).is_some() {
                1.0 / idx.valid_count(i, j) as f64
            } else {
                0.0
            }
        })
    }

    /// Random probabilities on valid slots.
    fn random_maps(rng: &mut SeededRng, n: usize, heads: usize, idx: &WindowIndex) -> Tensor {
        let (h, w, kk) = (idx.height(), idx.width(), idx.slots());
        let mut t = rng.uniform_tensor(&[n, heads, h, w, kk], 0.0, 1.0);
        for (r, row) in t.data_mut().chunks_mut(kk).enumerate() {
            let p = r % (h * w);
            let (i, j) = (p / w, p % w);
            for (s, v) in row.iter_mut().enumerate() {
                if idx.source(i, j, s).is_none() {
                    *v = 0.0;
                }
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        t
    }

    #[test]
    fn one_hot_maps_are_identity() {
        let mut rng = SeededRng::new(41);
        let tape = Tape::no_grad();
        let (h, w, k) = (6, 7, 3);
        let s = rng.normal_tensor(&[2, 8, h, w], 1.0);
        let i1 = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let i2 = WindowIndex::new(h, w, k, (2, 2)).unwrap();
        let m1 = maps_from(&tape, one_hot(2, 2, &i1), i1);
        let m2 = maps_from(&tape, one_hot(2, 2, &i2), i2);
        let out = aggregate_states(&tape.constant(s.clone()), &m1, &m2).unwrap();
        assert_eq!(out.value(), &s);
    }

    #[test]
    fn uniform_maps_are_a_clamped_box_filter() {
        let mut rng = SeededRng::new(42);
        let tape = Tape::no_grad();
        let (h, w, k) = (6, 5, 3);
        let s = rng.normal_tensor(&[1, 4, h, w], 1.0);
        let idx = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let m = maps_from(&tape, uniform(1, 1, &idx), idx.clone());
        let out = aggregate_states_with(&tape.constant(s.clone()), &[&m]).unwrap();
        let span = |i: usize, len: usize| {
            let lo = i.saturating_sub(k / 2).min(len - k);
            lo..lo + k
        };
        for c in 0..4 {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for r in span(i, h) {
                        for q in span(j, w) {
                            acc += s.at(&[0, c, r, q]);
                        }
                    }
                    assert!((out.value().at(&[0, c, i, j]) - acc / 9.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_maps_match_gather_oracle() {
        let mut rng = SeededRng::new(43);
        let tape = Tape::no_grad();
        let (h, w, k) = (6, 6, 3);
        let s = rng.normal_tensor(&[1, 4, h, w], 1.0);
        let i1 = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let i2 = WindowIndex::new(h, w, k, adaptive_dilation(h, w, k)).unwrap();
        let w1 = random_maps(&mut rng, 1, 1, &i1);
        let w2 = random_maps(&mut rng, 1, 1, &i2);
        let m1 = maps_from(&tape, w1.clone(), i1.clone());
        let m2 = maps_from(&tape, w2.clone(), i2.clone());
        let out = aggregate_states(&tape.constant(s.clone()), &m1, &m2).unwrap();
        for c in 0..4 {
            let (wt, idx) = if c < 2 { (&w1, &i1) } else { (&w2, &i2) };
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (slot, src) in idx.window(i, j).into_iter().enumerate() {
                        if let Some((r, q)) = src {
                            acc += wt.at(&[0, 0, i, j, slot]) * s.at(&[0, c, r, q]);
                        }
                    }
                    assert!((out.value().at(&[0, c, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_geometry_is_rejected() {
        let tape = Tape::no_grad();
        let idx = WindowIndex::new(5, 5, 3, (1, 1)).unwrap();
        let m = maps_from(&tape, one_hot(1, 1, &idx), idx);
        let s = tape.constant(Tensor::zeros(&[1, 4, 6, 6]));
        assert!(matches!(
            aggregate_states(&s, &m, &m),
            Err(Error::Contract { .. })
        ));
    }

    fn projection_tensors(rng: &mut SeededRng, c: usize) -> Vec<Tensor> {
        vec![
            rng.normal_tensor(&[c, c, 1, 1], 0.5),
            rng.normal_tensor(&[c], 0.5),
            rng.normal_tensor(&[1, c, 1, 1], 0.5),
            rng.normal_tensor(&[1], 0.5),
            rng.normal_tensor(&[1, c, 1, 1], 0.5),
            rng.normal_tensor(&[1], 0.5),
            rng.normal_tensor(&[c], 0.5),
            rng.normal_tensor(&[c], 0.5),
        ]
    }

    fn projection<'t>(v: &[Var<'t>]) -> ScanProjection<'t> {
        ScanProjection {
            w_delta: v[0].clone(),
            b_delta: v[1].clone(),
            w_b: v[2].clone(),
            b_b: v[3].clone(),
            w_c: v[4].clone(),
            b_c: v[5].clone(),
            a_log: v[6].clone(),
            d: v[7].clone(),
        }
    }

    fn consts<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
        ts.iter().map(|t| tape.constant(t.clone())).collect()
    }

    #[test]
    fn vanishing_scan_leaves_the_residual() {
        let mut rng = SeededRng::new(44);
        let tape = Tape::no_grad();
        let c = 4;
        let mut pt = projection_tensors(&mut rng, c);
        pt[0] = Tensor::zeros(&[c, c, 1, 1]);
        pt[1] = Tensor::full(&[c], -60.0);
        let proj = projection(&consts(&tape, &pt));
        let y = rng.normal_tensor(&[1, c, 5, 5], 1.0);
        let idx = WindowIndex::new(5, 5, 3, (1, 1)).unwrap();
        let m = maps_from(&tape, random_maps(&mut rng, 1, 1, &idx), idx.clone());
        let m2 = maps_from(&tape, random_maps(&mut rng, 1, 1, &idx), idx);
        let out = a2ssm_forward(&tape.constant(y.clone()), &m, &m2, &proj).unwrap();
        let want = Tensor::from_fn(y.shape(), |f| y.data()[f] * pt[7].data()[(f / 25) % c]);
        assert!(out.value().max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn pass_through_configuration_returns_states() {
        let mut rng = SeededRng::new(45);
        let tape = Tape::no_grad();
        let c = 4;
        let mut pt = projection_tensors(&mut rng, c);
        pt[4] = Tensor::zeros(&[1, c, 1, 1]);
        pt[5] = Tensor::ones(&[1]);
        pt[7] = Tensor::zeros(&[c]);
        let proj = projection(&consts(&tape, &pt));
        let (h, w) = (4, 6);
        let y = tape.constant(rng.normal_tensor(&[2, c, h, w], 1.0));
        let idx = WindowIndex::new(h, w, 3, (1, 1)).unwrap();
        let m = maps_from(&tape, one_hot(2, 1, &idx), idx);
        let trace = a2ssm_trace(&y, &[&m, &m], &proj).unwrap();
        let s = trace.states.s.value().reshape(&[2, c, h, w]).unwrap();
        assert_eq!(trace.out.value(), &s);
    }

    #[test]
    fn pipeline_equals_manual_composition() {
        let mut rng = SeededRng::new(46);
        let tape = Tape::no_grad();
        let c = 8;
        let (h, w, k) = (7, 7, 3);
        let pt = projection_tensors(&mut rng, c);
        let proj = projection(&consts(&tape, &pt));
        let y = tape.constant(rng.normal_tensor(&[1, c, h, w], 1.0));
        let i1 = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let i2 = WindowIndex::new(h, w, k, adaptive_dilation(h, w, k)).unwrap();
        let m1 = maps_from(&tape, random_maps(&mut rng, 1, 2, &i1), i1);
        let m2 = maps_from(&tape, random_maps(&mut rng, 1, 2, &i2), i2);
        let out = a2ssm_forward(&y, &m1, &m2, &proj).unwrap();

        let p = make_scan_params(&y, &proj).unwrap();
        let u = reshape(&y, &[1, c, h * w]).unwrap();
        let s = scan_parallel(&u, &p).unwrap();
        let s4 = reshape(&s.s, &[1, c, h, w]).unwrap();
        let agg = aggregate_states(&s4, &m1, &m2).unwrap();
        let cp = reshape(&p.cprime, &[1, 1, h, w]).unwrap();
        let manual = add(
            &mul_broadcast_channels(&agg, &cp).unwrap(),
            &mul_channels(&y, &p.d).unwrap(),
        )
        .unwrap();
        assert_eq!(out.value(), manual.value());
        assert_eq!(out.shape(), y.shape());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(47);
        let c = 4;
        let (h, w, k) = (4, 5, 3);
        let i1 = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let i2 = WindowIndex::new(h, w, k, (2, 2)).unwrap();
        let mut inputs = vec![rng.normal_tensor(&[1, c, h, w], 1.0)];
        inputs.extend(projection_tensors(&mut rng, c));
        inputs.push(random_maps(&mut rng, 1, 1, &i1));
        inputs.push(random_maps(&mut rng, 1, 1, &i2));
        let r = check(
            &inputs,
            |v| {
                let proj = projection(&v[1..9]);
                let m1 = AttentionMaps {
                    weights: v[9].clone(),
                    index: Rc::new(i1.clone()),
                };
                let m2 = AttentionMaps {
                    weights: v[10].clone(),
                    index: Rc::new(i2.clone()),
                };
                a2ssm_forward(&v[0], &m1, &m2, &proj)
            },
            5,
            Coverage::All,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    /// Latest raster position any slot of `p`'s windows reads.
    fn window_reach(idxs: &[&WindowIndex], i: usize, j: usize, w: usize) -> usize {
        idxs.iter()
            .flat_map(|idx| idx.window(i, j).into_iter().flatten())
            .map(|(r, c)| r * w + c)
            .max()
            .unwrap()
    }

    #[test]
    fn aggregation_reaches_past_the_scan_order() {
        let mut rng = SeededRng::new(48);
        let tape = Tape::no_grad();
        let c = 4;
        let (h, w, k) = (9, 9, 3);
        let pt = projection_tensors(&mut rng, c);
        let proj = projection(&consts(&tape, &pt));
        let i1 = WindowIndex::new(h, w, k, (1, 1)).unwrap();
        let i2 = WindowIndex::new(h, w, k, adaptive_dilation(h, w, k)).unwrap();
        let m1 = maps_from(&tape, random_maps(&mut rng, 1, 1, &i1), i1.clone());
        let m2 = maps_from(&tape, random_maps(&mut rng, 1, 1, &i2), i2.clone());
        let y = rng.normal_tensor(&[1, c, h, w], 1.0);
        let base = a2ssm_forward(&tape.constant(y.clone()), &m1, &m2, &proj).unwrap();
        let vanilla = vanilla_ssm_forward(&tape.constant(y.clone()), &proj).unwrap();
        let (pi, pj) = (4, 4);
        let p = pi * w + pj;
        let reach = window_reach(&[&i1, &i2], pi, pj, w);
        assert!(reach > p);
        let mut live_after = 0;
        for q in p + 1..h * w {
            let mut bumped = y.clone();
            for ch in 0..c {
                bumped.set(&[0, ch, q / w, q % w], y.at(&[0, ch, q / w, q % w]) + 1.0);
            }
            let out = a2ssm_forward(&tape.constant(bumped.clone()), &m1, &m2, &proj).unwrap();
            let van = vanilla_ssm_forward(&tape.constant(bumped), &proj).unwrap();
            let delta: f64 = (0..c)
                .map(|ch| {
                    (out.value().at(&[0, ch, pi, pj]) - base.value().at(&[0, ch, pi, pj])).abs()
                })
                .sum();
            let vdelta: f64 = (0..c)
                .map(|ch| {
                    (van.value().at(&[0, ch, pi, pj]) - vanilla.value().at(&[0, ch, pi, pj])).abs()
                })
                .sum();
            assert_eq!(vdelta, 0.0);
            if q > reach {
                assert_eq!(delta, 0.0, "q={q}");
            } else if delta > 0.0 {
                live_after += 1;
            }
        }
        assert!(live_after > 0);
    }
}
