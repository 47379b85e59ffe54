//! Central finite-difference verification of recorded gradients.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::weighted_sum;
use crate::params::{Ctx, ParameterStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − f| / max(1e-8, |a|, |f|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(input, flat coordinate, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Which coordinates of each input to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, drawn without replacement.
    Sample(usize),
}

/// Compares the tape gradient of `Σ w ⊙ f(inputs)` against central
/// differences, with `w` a fixed random projection drawn from `seed`.
///
/// The numerical derivative is formed from output differences,
/// `Σ w ⊙ (f(x + h) − f(x − h)) / 2h`, which avoids cancellation in the
/// projected scalar.
pub fn check<F>(inputs: &[Tensor], f: F, seed: u64, coverage: Coverage) -> Result<FdReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = SeededRng::new(seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars)?;
    let w = rng.normal_tensor(out.shape(), 1.0);
    let loss = weighted_sum(&out, &w)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&vars)?.value().clone())
    };

    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0;
    let mut worst = None;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if let Coverage::Sample(k) = coverage {
            rng.shuffle(&mut coords);
            coords.truncate(k);
        }
        for c in coords {
            let x0 = input.data()[c];
            probe[i].data_mut()[c] = x0 + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[c] = x0 - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(w.data())
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * STEP);
            let a = analytic[i].data()[c];
            let e = rel_err(a, numeric);
            if worst.is_none() || e > max_rel_err {
                max_rel_err = e;
                worst = Some((i, c, a, numeric));
            }
            coords_checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err,
        coords_checked,
        worst,
    })
}

/// Directional form of [`check`]: for each of `directions` random
/// unit directions `v` spanning every input, compares `⟨∇, v⟩` with
/// `(f(x + h·v) − f(x − h·v)) / 2h`, both projected on the same random
/// output weights.
///
/// Per-coordinate probing of a deep composition hits the floor set by
/// rounding noise on parameters whose true derivative is nearly zero; a
/// directional derivative sums many coordinates and stays well conditioned.
/// The report's `worst` holds `(0, direction, analytic, numeric)`.
pub fn check_directional<F>(
    inputs: &[Tensor],
    f: F,
    seed: u64,
    directions: usize,
) -> Result<FdReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = SeededRng::new(seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars)?;
    let w = rng.normal_tensor(out.shape(), 1.0);
    let loss = weighted_sum(&out, &w)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(weighted_sum(&f(&vars)?, &w)?.value().item())
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for d in 0..directions {
        // Unit length overall, so the step along `v` is exactly `STEP`.
        let raw: Vec<Tensor> = inputs
            .iter()
            .map(|t| rng.normal_tensor(t.shape(), 1.0))
            .collect();
        let norm = raw
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let v: Vec<Tensor> = raw.iter().map(|t| t.map(|x| x / norm)).collect();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&v)
                .map(|(x, v)| x.zip_map(v, |x, v| x + sign * STEP * v))
                .collect()
        };
        let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * STEP);
        let a: f64 = analytic
            .iter()
            .zip(&v)
            .map(|(g, v)| {
                g.data()
                    .iter()
                    .zip(v.data())
                    .map(|(g, v)| g * v)
                    .sum::<f64>()
            })
            .sum();
        let e = rel_err(a, numeric);
        if worst.is_none() || e > max_rel_err {
            max_rel_err = e;
            worst = Some((0, d, a, numeric));
        }
    }
    Ok(FdReport {
        max_rel_err,
        coords_checked: directions,
        worst,
    })
}

/// [`check_directional`] with `store`'s parameters bound as in
/// [`check_with_params`].
pub fn check_directional_with_params<F>(
    store: &ParameterStore,
    inputs: &[Tensor],
    f: F,
    seed: u64,
    directions: usize,
) -> Result<FdReport>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.iter().map(|(_, p)| p.value.clone()));
    check_directional(
        &all,
        |v| {
            let ctx = Ctx::from_vars(v[0].tape(), v[n..].to_vec());
            f(&ctx, &v[..n])
        },
        seed,
        directions,
    )
}

/// Adds Gaussian noise to every parameter so that finite differences see
/// unit-scale, well-conditioned gradients rather than those of a near-zero
/// initialization.
pub fn perturb_parameters(store: &mut ParameterStore, seed: u64, std: f64) {
    let mut rng = SeededRng::new(seed);
    for (_, p) in store.iter_mut() {
        let noise = rng.normal_tensor(p.value.shape(), std);
        p.value.add_assign(&noise);
    }
}

/// [`check`] over `inputs` followed by every parameter of `store`, with the
/// parameters bound into the context handed to `f`.
pub fn check_with_params<F>(
    store: &ParameterStore,
    inputs: &[Tensor],
    f: F,
    seed: u64,
    coverage: Coverage,
) -> Result<FdReport>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.iter().map(|(_, p)| p.value.clone()));
    check(
        &all,
        |v| {
            let ctx = Ctx::from_vars(v[0].tape(), v[n..].to_vec());
            f(&ctx, &v[..n])
        },
        seed,
        coverage,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elementwise_ops_pass() {
        let mut rng = SeededRng::new(3);
        for trial in 0..20 {
            let x = rng.normal_tensor(&[2, 3, 2], 1.5);
            for f in [ops::silu, ops::gelu, ops::softplus, ops::sigmoid] {
                let r = check(
                    std::slice::from_ref(&x),
                    |v| Ok(f(&v[0])),
                    trial,
                    Coverage::All,
                )
                .unwrap();
                assert!(r.passed(), "{r:?}");
            }
        }
    }

    #[test]
    fn conv_weight_gradient_is_input_correlation() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor(&[1, 2, 5, 5], 1.0);
        let w = rng.normal_tensor(&[3, 2, 3, 3], 1.0);
        let r = check(
            &[x, w],
            |v| {
                Ok(ops::sum(&ops::conv2d(
                    &v[0],
                    &v[1],
                    None,
                    ops::Conv2dSpec::strided(3, 1),
                )?))
            },
            0,
            Coverage::All,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // A deliberately broken op: forward x², backward claims x.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check(
            &[x],
            |v| {
                let out = v[0].value().map(|a| a * a);
                let xv = v[0].shared();
                Ok(v[0].tape().record(out, &[&v[0]], move |g, _| {
                    vec![Some(g.zip_map(&xv, |g, x| g * x))]
                }))
            },
            0,
            Coverage::All,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn directional_check_agrees_and_detects() {
        let mut rng = SeededRng::new(4);
        let inputs = vec![
            rng.normal_tensor(&[2, 3, 4, 5], 1.0),
            rng.normal_tensor(&[2, 3, 4, 5], 1.0),
        ];
        let good = check_directional(
            &inputs,
            |v| Ok(crate::ops::gelu(&crate::ops::mul(&v[0], &v[1])?)),
            1,
            8,
        )
        .unwrap();
        assert!(good.passed(), "{good:?}");
        assert_eq!(good.coords_checked, 8);

        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let bad = check_directional(
            &[x],
            |v| {
                let out = v[0].value().map(|a| a * a);
                let xv = v[0].shared();
                Ok(v[0].tape().record(out, &[&v[0]], move |g, _| {
                    vec![Some(g.zip_map(&xv, |g, x| g * x))]
                }))
            },
            0,
            4,
        )
        .unwrap();
        assert!(!bad.passed());
    }
}
