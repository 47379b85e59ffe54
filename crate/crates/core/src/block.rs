//! The MASS token mixer, the convolutional feed-forward network, and the
//! residual block that stacks them.

use serde::{Deserialize, Serialize};

use crate::a2ssm::{a2ssm_forward_with, vanilla_ssm_forward};
use crate::attention::{
    ama_forward, windowed_attention, windowed_attention_output, AttentionMaps, AttentionParams,
};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv};
use crate::ops::{add, gelu, mul, scale_per_sample, silu};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::scan::ScanProjection;

/// Attention layout of the mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Channel split into a dense-window branch and a dilated-window branch.
    #[default]
    MultiScale,
    /// One branch whose window covers the whole map.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsmKind {
    /// Scan states re-aggregated with the attention maps.
    #[default]
    A2ssm,
    /// Scan states used directly.
    Vanilla,
    /// No state space branch: the attention output passes through.
    None,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    #[serde(default)]
    pub attention: AttentionKind,
    #[serde(default)]
    pub ssm: SsmKind,
    #[serde(default = "yes")]
    pub gate: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            attention: AttentionKind::MultiScale,
            ssm: SsmKind::A2ssm,
            gate: true,
        }
    }
}

impl MixerConfig {
    /// Global attention with no state space branch: the quadratic baseline.
    pub fn global_attention() -> Self {
        MixerConfig {
            attention: AttentionKind::Global,
            ssm: SsmKind::None,
            gate: true,
        }
    }

    /// Dense and dilated local attention only.
    pub fn attention_only() -> Self {
        MixerConfig {
            ssm: SsmKind::None,
            ..Self::default()
        }
    }
}

/// Smallest odd window covering an `h × w` map.
pub fn covering_window(h: usize, w: usize) -> usize {
    let m = h.max(w);
    m + 1 - m % 2
}

#[derive(Debug, Clone)]
pub struct AttnBranch {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub o: Conv,
}

impl AttnBranch {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(AttnBranch {
            q: Conv::pointwise(&mut s, "q", c, c, true)?,
            k: Conv::pointwise(&mut s, "k", c, c, false)?,
            v: Conv::pointwise(&mut s, "v", c, c, true)?,
            o: Conv::pointwise(&mut s, "o", c, c, true)?,
        })
    }

    pub fn bind<'t>(&self, ctx: &Ctx<'t>) -> AttentionParams<'t> {
        AttentionParams {
            wq: ctx.param(self.q.weight),
            bq: ctx.opt_param(self.q.bias),
            wk: ctx.param(self.k.weight),
            wv: ctx.param(self.v.weight),
            bv: ctx.opt_param(self.v.bias),
            wo: ctx.param(self.o.weight),
            bo: ctx.opt_param(self.o.bias),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScanProj {
    pub delta: Conv,
    pub b: Conv,
    pub c: Conv,
    pub a_log: ParamId,
    pub d: ParamId,
}

impl ScanProj {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(ScanProj {
            delta: Conv::pointwise(&mut s, "delta", c, c, true)?,
            b: Conv::pointwise(&mut s, "b_proj", c, 1, true)?,
            c: Conv::pointwise(&mut s, "c_proj", c, 1, true)?,
            a_log: s.zeros("a_log", &[c])?,
            d: s.ones("d", &[c])?,
        })
    }

    pub fn bind<'t>(&self, ctx: &Ctx<'t>) -> ScanProjection<'t> {
        let bias = |c: &Conv| ctx.param(c.bias.expect("scan projections carry biases"));
        ScanProjection {
            w_delta: ctx.param(self.delta.weight),
            b_delta: bias(&self.delta),
            w_b: ctx.param(self.b.weight),
            b_b: bias(&self.b),
            w_c: ctx.param(self.c.weight),
            b_c: bias(&self.c),
            a_log: ctx.param(self.a_log),
            d: ctx.param(self.d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MassParams {
    pub config: MixerConfig,
    pub heads: usize,
    /// Window size for multi-scale attention; global attention sizes its
    /// window from the input.
    pub k: usize,
    /// `[sla, dla]` for multi-scale attention, `[global]` otherwise.
    pub branches: Vec<AttnBranch>,
    pub scan: Option<ScanProj>,
    pub gate: Option<Conv>,
}

impl MassParams {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c: usize,
        heads: usize,
        k: usize,
        config: MixerConfig,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let branches = match config.attention {
            AttentionKind::MultiScale => {
                if !c.is_multiple_of(2) || !heads.is_multiple_of(2) {
                    return Err(Error::config(
                        "heads",
                        format!("{c} channels / {heads} heads cannot be split into two branches"),
                    ));
                }
                if !(c / 2).is_multiple_of(heads / 2) {
                    return Err(Error::config(
                        "heads",
                        format!("{} channels do not split into {} heads", c / 2, heads / 2),
                    ));
                }
                vec![
                    AttnBranch::new(&mut s, "sla", c / 2)?,
                    AttnBranch::new(&mut s, "dla", c / 2)?,
                ]
            }
            AttentionKind::Global => {
                if heads == 0 || !c.is_multiple_of(heads) {
                    return Err(Error::config(
                        "heads",
                        format!("{c} channels do not split into {heads} heads"),
                    ));
                }
                vec![AttnBranch::new(&mut s, "attn", c)?]
            }
        };
        let scan = match config.ssm {
            SsmKind::None => None,
            _ => Some(ScanProj::new(&mut s, "ssm", c)?),
        };
        let gate = if config.gate {
            Some(Conv::pointwise(&mut s, "gate", c, c, true)?)
        } else {
            None
        };
        Ok(MassParams {
            config,
            heads,
            k,
            branches,
            scan,
            gate,
        })
    }
}

/// `(X₁, X₂) = split(X)`, `Y = [SLA(X₁), DLA(X₂)]`, `Y′ = A2SSM(Y, maps)`,
/// `Z = Y′ ⊙ SiLU(Conv1×1(X))`.
pub fn mass_forward<'t>(ctx: &Ctx<'t>, x: &Var<'t>, p: &MassParams) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "mass_forward",
            "rank",
            format!("expected [N,C,H,W], got {s:?}"),
        ));
    }
    let (h, w) = (s[2], s[3]);
    let needs_maps = p.config.ssm == SsmKind::A2ssm;
    let (y, maps): (Var<'t>, Vec<AttentionMaps<'t>>) = match p.config.attention {
        AttentionKind::MultiScale => {
            let (y, a1, a2) = ama_forward(
                x,
                &p.branches[0].bind(ctx),
                &p.branches[1].bind(ctx),
                p.heads,
                p.k,
            )?;
            (y, vec![a1, a2])
        }
        AttentionKind::Global => {
            let k = covering_window(h, w);
            let prm = p.branches[0].bind(ctx);
            if needs_maps {
                let (y, m) = windowed_attention(x, &prm, p.heads, k, (1, 1))?;
                (y, vec![m])
            } else {
                (
                    windowed_attention_output(x, &prm, p.heads, k, (1, 1))?,
                    Vec::new(),
                )
            }
        }
    };
    let y = match (p.config.ssm, &p.scan) {
        (SsmKind::A2ssm, Some(sp)) => {
            a2ssm_forward_with(&y, &maps.iter().collect::<Vec<_>>(), &sp.bind(ctx))?
        }
        (SsmKind::Vanilla, Some(sp)) => vanilla_ssm_forward(&y, &sp.bind(ctx))?,
        _ => y,
    };
    drop(maps);
    match &p.gate {
        Some(g) => mul(&y, &silu(&g.forward(ctx, x)?)),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct ConvFfnParams {
    pub fc1: Conv,
    pub dw: Conv,
    pub fc2: Conv,
}

impl ConvFfnParams {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize, expansion: usize) -> Result<Self> {
        Self::with_output(pb, name, c, c, expansion)
    }

    /// Expands `cin` to `cin · expansion` and projects to `cout`.
    pub fn with_output(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::config("ffn_expansion", "must be at least 1"));
        }
        let hidden = cin * expansion;
        let mut s = pb.scope(name);
        Ok(ConvFfnParams {
            fc1: Conv::pointwise(&mut s, "fc1", cin, hidden, true)?,
            dw: Conv::depthwise(&mut s, "dw", hidden, 3, 1)?,
            fc2: Conv::pointwise(&mut s, "fc2", hidden, cout, true)?,
        })
    }
}

/// 1×1 expand → depthwise 3×3 → GELU → 1×1 project.
pub fn conv_ffn<'t>(ctx: &Ctx<'t>, x: &Var<'t>, p: &ConvFfnParams) -> Result<Var<'t>> {
    let h = p.fc1.forward(ctx, x)?;
    let h = gelu(&p.dw.forward(ctx, &h)?);
    p.fc2.forward(ctx, &h)
}

/// Stochastic depth: in training, each sample's branch is dropped with
/// probability `rate` and survivors are scaled by `1 / (1 − rate)`.
pub fn drop_path<'t>(ctx: &Ctx<'t>, x: &Var<'t>, rate: f64) -> Result<Var<'t>> {
    if !ctx.is_training() || rate <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let keep = 1.0 - rate;
    let factors: Vec<f64> = ctx.with_rng(|r| {
        (0..n)
            .map(|_| if r.bernoulli(keep) { 1.0 / keep } else { 0.0 })
            .collect()
    });
    scale_per_sample(x, &factors)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub dw: Conv,
    pub norm1: ChannelNorm,
    pub mass: MassParams,
    pub norm2: ChannelNorm,
    pub ffn: ConvFfnParams,
    pub drop_path: f64,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c: usize,
        heads: usize,
        k: usize,
        expansion: usize,
        drop_path: f64,
        mixer: MixerConfig,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::config(
                "drop_path",
                format!("{drop_path} outside [0, 1)"),
            ));
        }
        let mut s = pb.scope(name);
        Ok(BlockParams {
            dw: Conv::depthwise(&mut s, "dw", c, 3, 1)?,
            norm1: ChannelNorm::new(&mut s, "norm1", c)?,
            mass: MassParams::new(&mut s, "mass", c, heads, k, mixer)?,
            norm2: ChannelNorm::new(&mut s, "norm2", c)?,
            ffn: ConvFfnParams::new(&mut s, "ffn", c, expansion)?,
            drop_path,
        })
    }
}

/// `X += DW3×3(X)`; `X += DropPath(MASS(Norm(X)))`; `X += DropPath(FFN(Norm(X)))`.
pub fn a2mamba_block<'t>(ctx: &Ctx<'t>, x: &Var<'t>, p: &BlockParams) -> Result<Var<'t>> {
    let x = add(x, &p.dw.forward(ctx, x)?)?;
    let m = mass_forward(ctx, &p.norm1.forward(ctx, &x)?, &p.mass)?;
    let x = add(&x, &drop_path(ctx, &m, p.drop_path)?)?;
    let f = conv_ffn(ctx, &p.norm2.forward(ctx, &x)?, &p.ffn)?;
    add(&x, &drop_path(ctx, &f, p.drop_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a2ssm::a2ssm_forward;
    use crate::autograd::Tape;
    use crate::fdcheck::{check_with_params, perturb_parameters, Coverage};
    use crate::ops::conv2d;
    use crate::params::ParameterStore;
    use crate::rng::SeededRng;
    use crate::tensor::Tensor;

    fn store_with<T>(
        seed: u64,
        f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>,
    ) -> (ParameterStore, T) {
        let mut store = ParameterStore::new();
        let mut rng = SeededRng::new(seed);
        let p = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
        (store, p)
    }

    #[test]
    fn covering_window_is_odd() {
        assert_eq!(covering_window(4, 4), 5);
        assert_eq!(covering_window(7, 2), 7);
        assert_eq!(covering_window(16, 9), 17);
    }

    #[test]
    fn zero_gate_annihilates() {
        let (mut store, p) = store_with(51, |pb| {
            MassParams::new(pb, "mass", 8, 2, 3, MixerConfig::default())
        });
        store.fill_where(|n| n.starts_with("mass.gate."), 0.0);
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(SeededRng::new(1).normal_tensor(&[1, 8, 6, 6], 1.0));
        let z = mass_forward(&ctx, &x, &p).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_shape_contract() {
        let (store, p) = store_with(52, |pb| {
            MassParams::new(pb, "mass", 64, 4, 11, MixerConfig::default())
        });
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(SeededRng::new(2).normal_tensor(&[2, 64, 32, 32], 1.0));
        assert_eq!(
            mass_forward(&ctx, &x, &p).unwrap().shape(),
            &[2, 64, 32, 32]
        );
    }

    #[test]
    fn mass_is_the_composition_of_its_parts() {
        let (mut store, p) = store_with(53, |pb| {
            MassParams::new(pb, "mass", 8, 4, 3, MixerConfig::default())
        });
        perturb_parameters(&mut store, 3, 0.3);
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(SeededRng::new(4).normal_tensor(&[2, 8, 7, 9], 1.0));
        let z = mass_forward(&ctx, &x, &p).unwrap();

        let (y, a1, a2) = ama_forward(
            &x,
            &p.branches[0].bind(&ctx),
            &p.branches[1].bind(&ctx),
            4,
            3,
        )
        .unwrap();
        let y2 = a2ssm_forward(&y, &a1, &a2, &p.scan.as_ref().unwrap().bind(&ctx)).unwrap();
        let g = p.gate.as_ref().unwrap();
        let gate = conv2d(
            &x,
            &ctx.param(g.weight),
            Some(&ctx.param(g.bias.unwrap())),
            crate::ops::Conv2dSpec::pointwise(),
        )
        .unwrap();
        let manual = mul(&y2, &silu(&gate)).unwrap();
        assert_eq!(z.value(), manual.value());
    }

    #[test]
    fn ffn_zero_weights_and_identity_wiring() {
        let (mut store, p) = store_with(54, |pb| ConvFfnParams::new(pb, "ffn", 4, 4));
        let tape = Tape::no_grad();
        let x = tape.constant(SeededRng::new(5).normal_tensor(&[1, 4, 5, 5], 1.0));
        store.fill_where(|_| true, 0.0);
        let out = conv_ffn(&Ctx::eval(&tape, &store), &x, &p).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        let (mut store, p) = store_with(55, |pb| ConvFfnParams::new(pb, "ffn", 4, 1));
        let eye = Tensor::from_fn(&[4, 4, 1, 1], |f| f64::from(u8::from(f / 4 == f % 4)));
        *store.by_name_mut("ffn.fc1.weight").unwrap() = eye.clone();
        *store.by_name_mut("ffn.fc2.weight").unwrap() = eye;
        store.fill_where(|n| n.starts_with("ffn.dw."), 0.0);
        let out = conv_ffn(&Ctx::eval(&tape, &store), &x, &p).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    fn param_check(
        store: &ParameterStore,
        x: Tensor,
        seed: u64,
        coverage: Coverage,
        f: impl for<'t> Fn(&Ctx<'t>, &Var<'t>) -> Result<Var<'t>>,
    ) -> crate::fdcheck::FdReport {
        check_with_params(store, &[x], |ctx, v| f(ctx, &v[0]), seed, coverage).unwrap()
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let (mut store, p) = store_with(56, |pb| ConvFfnParams::new(pb, "ffn", 4, 2));
        perturb_parameters(&mut store, 6, 0.4);
        let x = SeededRng::new(7).normal_tensor(&[1, 4, 5, 5], 1.0);
        let r = param_check(&store, x, 1, Coverage::All, |ctx, x| conv_ffn(ctx, x, &p));
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn zeroed_block_is_identity() {
        let (mut store, p) = store_with(57, |pb| {
            BlockParams::new(pb, "blk", 8, 2, 3, 4, 0.1, MixerConfig::default())
        });
        store.fill_where(
            |n| !n.contains("norm") && !n.ends_with("a_log") && !n.ends_with(".d"),
            0.0,
        );
        let tape = Tape::no_grad();
        let x = tape.constant(SeededRng::new(8).normal_tensor(&[2, 8, 6, 6], 1.0));
        let y = a2mamba_block(&Ctx::eval(&tape, &store), &x, &p).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn small_variant_stage3_block_keeps_shape_and_is_deterministic() {
        let (store, p) = store_with(58, |pb| {
            BlockParams::new(pb, "blk", 320, 10, 7, 4, 0.0, MixerConfig::default())
        });
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &store);
        let x = tape.constant(SeededRng::new(9).normal_tensor(&[1, 320, 14, 14], 1.0));
        let a = a2mamba_block(&ctx, &x, &p).unwrap();
        let b = a2mamba_block(&ctx, &x, &p).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn drop_path_only_in_training() {
        let (store, _) = store_with(59, |_| Ok(()));
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::ones(&[64, 1, 1, 1]));
        let eval = drop_path(&Ctx::eval(&tape, &store), &x, 0.5).unwrap();
        assert_eq!(eval.value(), x.value());
        let train = drop_path(&Ctx::train(&tape, &store, 3), &x, 0.5).unwrap();
        let d = train.value().data();
        assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(d.contains(&0.0) && d.contains(&2.0));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (mut store, p) = store_with(60, |pb| {
            BlockParams::new(pb, "blk", 8, 2, 3, 4, 0.0, MixerConfig::default())
        });
        perturb_parameters(&mut store, 10, 0.3);
        let x = SeededRng::new(11).normal_tensor(&[1, 8, 14, 14], 1.0);
        let r = param_check(&store, x, 2, Coverage::Sample(6), |ctx, x| {
            a2mamba_block(ctx, x, &p)
        });
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn mixer_variants_run() {
        for cfg in [
            MixerConfig::global_attention(),
            MixerConfig::attention_only(),
            MixerConfig {
                ssm: SsmKind::Vanilla,
                ..MixerConfig::default()
            },
            MixerConfig {
                attention: AttentionKind::Global,
                ssm: SsmKind::A2ssm,
                gate: false,
            },
        ] {
            let (store, p) = store_with(61, |pb| MassParams::new(pb, "mass", 8, 2, 3, cfg));
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &store);
            let x = tape.leaf(SeededRng::new(12).normal_tensor(&[1, 8, 5, 6], 1.0));
            let z = mass_forward(&ctx, &x, &p).unwrap();
            assert_eq!(z.shape(), x.shape());
            assert!(z.value().all_finite());
        }
    }
}
