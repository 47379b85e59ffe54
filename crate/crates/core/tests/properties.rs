//! Randomized invariants over the public API.

use std::rc::Rc;

use a2mamba::a2ssm::a2ssm_forward;
use a2mamba::attention::{adaptive_dilation, attention_weights, WindowIndex};
use a2mamba::model::{build_model, forward_features, ModelConfig};
use a2mamba::ops::{conv2d, pixel_shuffle, pixel_unshuffle, softmax_lastaxis, Conv2dSpec};
use a2mamba::params::Ctx;
use a2mamba::rng::SeededRng;
use a2mamba::scan::{scan_parallel, ScanParams, ScanProjection};
use a2mamba::{Tape, Tensor};
use proptest::prelude::*;

fn sorted(t: &Tensor) -> Vec<f64> {
    let mut v = t.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        rows in 1usize..5, len in 1usize..12, seed in any::<u64>(), shift in -50.0f64..50.0,
    ) {
        let tape = Tape::no_grad();
        let x = SeededRng::new(seed).normal_tensor(&[rows, len], 3.0);
        let p = softmax_lastaxis(&tape.constant(x.clone())).unwrap();
        let p = p.value();
        prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for row in p.data().chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let q = softmax_lastaxis(&tape.constant(x.map(|v| v + shift))).unwrap();
        prop_assert!(q.value().max_abs_diff(p) <= 1e-12);
    }

    #[test]
    fn pixel_unshuffle_keeps_every_value(
        n in 1usize..3, c in 1usize..4, r in 1usize..4, hb in 1usize..4, wb in 1usize..4,
        seed in any::<u64>(),
    ) {
        let tape = Tape::no_grad();
        let x = SeededRng::new(seed).normal_tensor(&[n, c, hb * r, wb * r], 1.0);
        let y = pixel_unshuffle(&tape.constant(x.clone()), r).unwrap();
        prop_assert_eq!(y.shape(), &[n, c * r * r, hb, wb][..]);
        prop_assert_eq!(sorted(y.value()), sorted(&x));
        let back = pixel_shuffle(&y, r).unwrap();
        prop_assert_eq!(back.value(), &x);
    }

    #[test]
    fn depthwise_identity_kernel_is_exact(
        c in 1usize..6, h in 1usize..9, w in 1usize..9, seed in any::<u64>(),
    ) {
        let tape = Tape::no_grad();
        let x = SeededRng::new(seed).normal_tensor(&[1, c, h, w], 1.0);
        let out = conv2d(
            &tape.constant(x.clone()),
            &tape.constant(Tensor::ones(&[c, 1, 1, 1])),
            None,
            Conv2dSpec::depthwise(c, 1, 1),
        )
        .unwrap();
        prop_assert_eq!(out.value(), &x);
    }

    #[test]
    fn attention_rows_are_distributions_over_valid_slots(
        h in 1usize..10, w in 1usize..10, half in 0usize..3, dh in 1usize..4, dw in 1usize..4,
        heads in 1usize..3, seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let tape = Tape::no_grad();
        let mut rng = SeededRng::new(seed);
        let q = tape.constant(rng.normal_tensor(&[1, 2 * heads, h, w], 2.0));
        let kk = tape.constant(rng.normal_tensor(&[1, 2 * heads, h, w], 2.0));
        let index = Rc::new(WindowIndex::new(h, w, k, (dh, dw)).unwrap());
        let maps = attention_weights(&q, &kk, heads, Rc::clone(&index)).unwrap();
        let slots = k * k;
        for (r, row) in maps.weights.value().data().chunks(slots).enumerate() {
            let p = r % (h * w);
            let (i, j) = (p / w, p % w);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (s, v) in row.iter().enumerate() {
                if index.source(i, j, s).is_none() {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn scan_states_ignore_later_inputs(
        c in 1usize..4, l in 1usize..80, seed in any::<u64>(), pick in any::<prop::sample::Index>(),
    ) {
        let tape = Tape::no_grad();
        let mut rng = SeededRng::new(seed);
        let u = rng.normal_tensor(&[1, c, l], 1.0);
        let p = ScanParams {
            delta: tape.constant(rng.uniform_tensor(&[1, c, l], 0.01, 2.0)),
            b: tape.constant(rng.normal_tensor(&[1, 1, l], 1.0)),
            cprime: tape.constant(rng.normal_tensor(&[1, 1, l], 1.0)),
            a_log: tape.constant(rng.normal_tensor(&[c], 0.5)),
            d: tape.constant(rng.normal_tensor(&[c], 1.0)),
        };
        let t = pick.index(l);
        let mut bumped = u.clone();
        for ci in 0..c {
            bumped.set(&[0, ci, t], u.at(&[0, ci, t]) + 1.0);
        }
        let a = scan_parallel(&tape.constant(u), &p).unwrap();
        let b = scan_parallel(&tape.constant(bumped), &p).unwrap();
        for ci in 0..c {
            for s in 0..t {
                prop_assert_eq!(a.s.value().at(&[0, ci, s]), b.s.value().at(&[0, ci, s]));
            }
            prop_assert_ne!(a.s.value().at(&[0, ci, t]), b.s.value().at(&[0, ci, t]));
        }
    }

    #[test]
    fn a2ssm_preserves_shape(
        n in 1usize..3, groups in 1usize..3, h in 1usize..8, w in 1usize..8, half in 0usize..2,
        seed in any::<u64>(),
    ) {
        let (c, k) = (4 * groups, 2 * half + 1);
        let tape = Tape::no_grad();
        let mut rng = SeededRng::new(seed);
        let proj = ScanProjection {
            w_delta: tape.constant(rng.normal_tensor(&[c, c, 1, 1], 0.5)),
            b_delta: tape.constant(rng.normal_tensor(&[c], 0.5)),
            w_b: tape.constant(rng.normal_tensor(&[1, c, 1, 1], 0.5)),
            b_b: tape.constant(rng.normal_tensor(&[1], 0.5)),
            w_c: tape.constant(rng.normal_tensor(&[1, c, 1, 1], 0.5)),
            b_c: tape.constant(rng.normal_tensor(&[1], 0.5)),
            a_log: tape.constant(rng.normal_tensor(&[c], 0.5)),
            d: tape.constant(rng.normal_tensor(&[c], 1.0)),
        };
        let y = tape.constant(rng.normal_tensor(&[n, c, h, w], 1.0));
        let mut qk = || tape.constant(rng.normal_tensor(&[n, c / 2, h, w], 1.0));
        let sla_idx = Rc::new(WindowIndex::new(h, w, k, (1, 1)).unwrap());
        let dla_idx = Rc::new(WindowIndex::new(h, w, k, adaptive_dilation(h, w, k)).unwrap());
        let sla = attention_weights(&qk(), &qk(), groups, sla_idx).unwrap();
        let dla = attention_weights(&qk(), &qk(), groups, dla_idx).unwrap();
        let out = a2ssm_forward(&y, &sla, &dla, &proj).unwrap();
        prop_assert_eq!(out.shape(), y.shape());
        prop_assert!(out.value().all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn stage_maps_follow_the_stride_schedule(hm in 1usize..4, wm in 1usize..4) {
        let (h, w) = (32 * hm, 32 * wm);
        let model = build_model(&ModelConfig::toy(), 0).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &model.store);
        let x = tape.constant(SeededRng::new(1).normal_tensor(&[1, 3, h, w], 1.0));
        let feats = forward_features(&ctx, &model, &x).unwrap();
        for (s, f) in feats.iter().enumerate() {
            let stride = 4 << s;
            prop_assert_eq!(
                f.shape(),
                &[1, model.config.channels[s], h / stride, w / stride][..]
            );
        }
    }
}
