//! Registry of finite-difference suites, one per differentiable operation
//! plus whole-block and decoder compositions.

use std::fmt::Write as _;
use std::rc::Rc;

use a2mamba::a2ssm::{a2ssm_forward, aggregate_states, vanilla_ssm_forward};
use a2mamba::attention::{
    ama_forward, attention_weights, window_aggregate, windowed_attention, WindowIndex,
};
use a2mamba::block::{
    a2mamba_block, conv_ffn, mass_forward, AttnBranch, BlockParams, ConvFfnParams, MassParams,
    MixerConfig, ScanProj,
};
use a2mamba::decoder::{
    build_decoder, fuse_stages, mm_refine, rep_conv, segman_v2_decode, DecoderConfig, RefineParams,
    RepConvParams,
};
use a2mamba::fdcheck::{
    check, check_directional_with_params, check_with_params, perturb_parameters, Coverage, FdReport,
};
use a2mamba::model::{build_model, forward_classify, ModelConfig};
use a2mamba::ops::{
    add, bilinear_resize, broadcast_spatial, concat_channels, conv2d, cross_entropy, gelu,
    global_avg_pool, layer_norm, layer_norm_axis, mul, mul_broadcast_channels, mul_channels,
    pixel_shuffle, pixel_unshuffle, reshape, scale, scale_per_sample, sigmoid, silu,
    slice_channels, softmax_lastaxis, softplus, sub, sum, weighted_sum, Conv2dSpec,
};
use a2mamba::params::{Ctx, ParamBuilder, ParameterStore};
use a2mamba::rng::SeededRng;
use a2mamba::scan::{make_scan_params, scan_naive, scan_parallel, ScanParams};
use a2mamba::{Result, Tensor, Var};

/// Module names accepted as filters, besides individual op names.
pub const MODULES: [&str; 7] = [
    "tensor_core",
    "local_attention",
    "selective_scan",
    "a2ssm",
    "mass_block",
    "model",
    "mm_refine",
];

/// Elements above which an input is probed at a random subset of
/// coordinates instead of exhaustively.
const FULL_COVERAGE_LIMIT: usize = 512;
const SAMPLED_COORDS: usize = 48;
/// Random directions probed in the whole-model suite, which checks
/// directional derivatives over every parameter at once.
const MODEL_DIRECTIONS: usize = 8;
/// Noise added to initialized parameters of composite suites.
const PARAM_NOISE: f64 = 0.3;

type Runner = Box<dyn Fn(u64) -> Result<FdReport>>;

pub struct GradSuite {
    pub module: &'static str,
    pub op: &'static str,
    pub shape: String,
    run: Runner,
}

impl GradSuite {
    pub fn run(&self, seed: u64) -> Result<FdReport> {
        (self.run)(seed)
    }
}

fn shape_label(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn coverage_for(inputs: &[Tensor]) -> Coverage {
    if inputs.iter().all(|t| t.numel() <= FULL_COVERAGE_LIMIT) {
        Coverage::All
    } else {
        Coverage::Sample(SAMPLED_COORDS)
    }
}

/// Suite over freshly drawn inputs and no parameters.
fn inputs_suite<G, F>(
    module: &'static str,
    op: &'static str,
    shape: &[usize],
    gen: G,
    f: F,
) -> GradSuite
where
    G: Fn(&mut SeededRng) -> Vec<Tensor> + 'static,
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    GradSuite {
        module,
        op,
        shape: shape_label(shape),
        run: Box::new(move |seed| {
            let inputs = gen(&mut SeededRng::derive(seed, 1));
            check(&inputs, &f, seed, coverage_for(&inputs))
        }),
    }
}

/// Standard-normal inputs of the given shapes; the first is the reported one.
fn normal_suite<F>(module: &'static str, op: &'static str, shapes: &[&[usize]], f: F) -> GradSuite
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    let owned: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    inputs_suite(
        module,
        op,
        shapes[0],
        move |rng| owned.iter().map(|s| rng.normal_tensor(s, 1.0)).collect(),
        f,
    )
}

/// Suite over a parameterized layer: parameters are initialized from the
/// seed, perturbed to unit-ish scale and checked together with the inputs.
fn params_suite<P, B, F>(
    module: &'static str,
    op: &'static str,
    shapes: &[&[usize]],
    coverage: Coverage,
    build: B,
    f: F,
) -> GradSuite
where
    P: 'static,
    B: Fn(&mut ParamBuilder<'_>) -> Result<P> + 'static,
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>], &P) -> Result<Var<'t>> + 'static,
{
    let owned: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    GradSuite {
        module,
        op,
        shape: shape_label(shapes[0]),
        run: Box::new(move |seed| {
            let mut store = ParameterStore::new();
            let mut rng = SeededRng::derive(seed, 2);
            let p = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
            perturb_parameters(&mut store, seed ^ 0x9e37, PARAM_NOISE);
            let mut rng = SeededRng::derive(seed, 1);
            let inputs: Vec<Tensor> = owned.iter().map(|s| rng.normal_tensor(s, 1.0)).collect();
            check_with_params(&store, &inputs, |ctx, v| f(ctx, v, &p), seed, coverage)
        }),
    }
}

fn dense3() -> Conv2dSpec {
    Conv2dSpec::strided(3, 1)
}

fn maps_from<'t>(
    v: &[Var<'t>],
    heads: usize,
    k: usize,
    dilation: (usize, usize),
) -> Result<a2mamba::attention::AttentionMaps<'t>> {
    let s = v[0].shape();
    let idx = Rc::new(WindowIndex::new(s[2], s[3], k, dilation)?);
    attention_weights(&v[0], &v[1], heads, idx)
}

/// Positive step sizes keep the scan inside its domain under perturbation.
fn scan_inputs(rng: &mut SeededRng) -> Vec<Tensor> {
    let (n, c, l) = (1, 3, 17);
    vec![
        rng.normal_tensor(&[n, c, l], 1.0),
        rng.uniform_tensor(&[n, c, l], 0.05, 1.5),
        rng.normal_tensor(&[n, 1, l], 1.0),
        rng.normal_tensor(&[n, 1, l], 1.0),
        rng.normal_tensor(&[c], 0.5),
        rng.normal_tensor(&[c], 1.0),
    ]
}

fn scan_params<'t>(v: &[Var<'t>]) -> ScanParams<'t> {
    ScanParams {
        delta: v[1].clone(),
        b: v[2].clone(),
        cprime: v[3].clone(),
        a_log: v[4].clone(),
        d: v[5].clone(),
    }
}

const DECODER_STAGES: [usize; 4] = [4, 8, 8, 16];

fn decoder_cfg() -> DecoderConfig {
    DecoderConfig {
        channels: 8,
        low_channels: 4,
        num_classes: 3,
        heads: 2,
        ffn_expansion: 2,
    }
}

/// Every suite, in a fixed order.
pub fn registry() -> Vec<GradSuite> {
    const TC: &str = "tensor_core";
    const LA: &str = "local_attention";
    const SS: &str = "selective_scan";
    const AS: &str = "a2ssm";
    const MB: &str = "mass_block";
    const MD: &str = "model";
    const MR: &str = "mm_refine";
    let x4: &[usize] = &[2, 3, 4, 5];
    vec![
        normal_suite(TC, "add", &[x4, x4], |v| add(&v[0], &v[1])),
        normal_suite(TC, "sub", &[x4, x4], |v| sub(&v[0], &v[1])),
        normal_suite(TC, "mul", &[x4, x4], |v| mul(&v[0], &v[1])),
        normal_suite(TC, "scale", &[x4], |v| Ok(scale(&v[0], -1.7))),
        normal_suite(TC, "silu", &[x4], |v| Ok(silu(&v[0]))),
        normal_suite(TC, "gelu", &[x4], |v| Ok(gelu(&v[0]))),
        normal_suite(TC, "softplus", &[x4], |v| Ok(softplus(&v[0]))),
        normal_suite(TC, "sigmoid", &[x4], |v| Ok(sigmoid(&v[0]))),
        normal_suite(TC, "mul_channels", &[x4, &[3]], |v| {
            mul_channels(&v[0], &v[1])
        }),
        normal_suite(TC, "mul_broadcast_channels", &[x4, &[2, 1, 4, 5]], |v| {
            mul_broadcast_channels(&v[0], &v[1])
        }),
        normal_suite(TC, "scale_per_sample", &[x4], |v| {
            scale_per_sample(&v[0], &[0.0, 1.25])
        }),
        normal_suite(TC, "sum", &[x4], |v| Ok(sum(&v[0]))),
        normal_suite(TC, "weighted_sum", &[x4], |v| {
            weighted_sum(
                &v[0],
                &Tensor::from_fn(&[2, 3, 4, 5], |f| (f as f64 * 0.37).sin()),
            )
        }),
        normal_suite(TC, "reshape", &[x4], |v| reshape(&v[0], &[6, 20])),
        normal_suite(TC, "slice_channels", &[x4], |v| slice_channels(&v[0], 1, 2)),
        normal_suite(TC, "concat_channels", &[x4, &[2, 2, 4, 5]], |v| {
            concat_channels(&[&v[0], &v[1]])
        }),
        normal_suite(TC, "global_avg_pool", &[x4], |v| global_avg_pool(&v[0])),
        normal_suite(TC, "broadcast_spatial", &[&[2, 3, 1, 1]], |v| {
            broadcast_spatial(&v[0], 4, 5)
        }),
        normal_suite(TC, "cross_entropy", &[&[4, 10]], |v| {
            cross_entropy(&v[0], &[3, 0, 9, 3])
        }),
        normal_suite(
            TC,
            "conv2d_3x3",
            &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]],
            |v| conv2d(&v[0], &v[1], Some(&v[2]), dense3()),
        ),
        normal_suite(
            TC,
            "conv2d_3x3_stride2",
            &[&[1, 3, 7, 6], &[4, 3, 3, 3], &[4]],
            |v| conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec::strided(3, 2)),
        ),
        normal_suite(TC, "conv2d_1x1", &[&[2, 3, 4, 5], &[4, 3, 1, 1]], |v| {
            conv2d(&v[0], &v[1], None, Conv2dSpec::pointwise())
        }),
        normal_suite(
            TC,
            "conv2d_depthwise_dilated",
            &[&[1, 3, 9, 8], &[3, 1, 5, 5], &[3]],
            |v| conv2d(&v[0], &v[1], Some(&v[2]), Conv2dSpec::depthwise(3, 5, 2)),
        ),
        normal_suite(TC, "layer_norm", &[&[3, 4, 6], &[6], &[6]], |v| {
            layer_norm(&v[0], &v[1], &v[2], 1e-6)
        }),
        normal_suite(TC, "layer_norm_channels", &[x4, &[3], &[3]], |v| {
            layer_norm_axis(&v[0], 1, &v[1], &v[2], 1e-6)
        }),
        normal_suite(TC, "softmax", &[&[3, 4, 7]], |v| softmax_lastaxis(&v[0])),
        normal_suite(TC, "pixel_unshuffle", &[&[1, 2, 4, 6]], |v| {
            pixel_unshuffle(&v[0], 2)
        }),
        normal_suite(TC, "pixel_shuffle", &[&[1, 8, 2, 3]], |v| {
            pixel_shuffle(&v[0], 2)
        }),
        normal_suite(TC, "bilinear_up", &[&[1, 2, 3, 5]], |v| {
            bilinear_resize(&v[0], 7, 9)
        }),
        normal_suite(TC, "bilinear_down", &[&[1, 2, 8, 6]], |v| {
            bilinear_resize(&v[0], 3, 4)
        }),
        // Attention kernels on raw query/key/value maps.
        normal_suite(
            LA,
            "attention_weights",
            &[&[1, 4, 5, 6], &[1, 4, 5, 6]],
            |v| Ok(maps_from(v, 2, 3, (1, 1))?.weights),
        ),
        normal_suite(
            LA,
            "attention_weights_dilated",
            &[&[1, 4, 7, 6], &[1, 4, 7, 6]],
            |v| Ok(maps_from(v, 2, 3, (2, 2))?.weights),
        ),
        normal_suite(
            LA,
            "window_aggregate",
            &[&[1, 4, 5, 6], &[1, 4, 5, 6], &[1, 4, 5, 6]],
            |v| window_aggregate(&maps_from(v, 2, 3, (2, 1))?, &v[2]),
        ),
        params_suite(
            LA,
            "windowed_attention",
            &[&[1, 4, 6, 5]],
            Coverage::All,
            |pb| AttnBranch::new(pb, "attn", 4),
            |ctx, v, p| Ok(windowed_attention(&v[0], &p.bind(ctx), 2, 3, (1, 1))?.0),
        ),
        params_suite(
            LA,
            "ama_forward",
            &[&[1, 8, 6, 6]],
            Coverage::Sample(SAMPLED_COORDS),
            |pb| {
                Ok((
                    AttnBranch::new(pb, "sla", 4)?,
                    AttnBranch::new(pb, "dla", 4)?,
                ))
            },
            |ctx, v, p| Ok(ama_forward(&v[0], &p.0.bind(ctx), &p.1.bind(ctx), 4, 3)?.0),
        ),
        // Scan on directly supplied parameters; the state map is the output.
        inputs_suite(SS, "scan_naive", &[1, 3, 17], scan_inputs, |v| {
            Ok(scan_naive(&v[0], &scan_params(v))?.s)
        }),
        inputs_suite(SS, "scan_parallel", &[1, 3, 17], scan_inputs, |v| {
            Ok(scan_parallel(&v[0], &scan_params(v))?.s)
        }),
        params_suite(
            SS,
            "make_scan_params",
            &[&[1, 4, 3, 5]],
            Coverage::All,
            |pb| ScanProj::new(pb, "ssm", 4),
            |ctx, v, p| {
                let sp = make_scan_params(&v[0], &p.bind(ctx))?;
                let l = 15;
                let parts = [
                    reshape(&sp.delta, &[1, 4, l, 1])?,
                    reshape(&sp.b, &[1, 1, l, 1])?,
                    reshape(&sp.cprime, &[1, 1, l, 1])?,
                ];
                concat_channels(&parts.iter().collect::<Vec<_>>())
            },
        ),
        normal_suite(
            AS,
            "aggregate_states",
            &[&[1, 4, 5, 6], &[1, 2, 5, 6], &[1, 2, 5, 6]],
            |v| {
                let s = v[1].shape();
                let sla = attention_weights(
                    &v[1],
                    &v[2],
                    1,
                    Rc::new(WindowIndex::new(s[2], s[3], 3, (1, 1))?),
                )?;
                let dla = attention_weights(
                    &v[2],
                    &v[1],
                    1,
                    Rc::new(WindowIndex::new(s[2], s[3], 3, (2, 3))?),
                )?;
                aggregate_states(&v[0], &sla, &dla)
            },
        ),
        params_suite(
            AS,
            "a2ssm_forward",
            &[&[1, 4, 5, 6], &[1, 2, 5, 6], &[1, 2, 5, 6]],
            Coverage::Sample(SAMPLED_COORDS),
            |pb| ScanProj::new(pb, "ssm", 4),
            |ctx, v, p| {
                let s = v[1].shape();
                let sla = attention_weights(
                    &v[1],
                    &v[2],
                    1,
                    Rc::new(WindowIndex::new(s[2], s[3], 3, (1, 1))?),
                )?;
                let dla = attention_weights(
                    &v[2],
                    &v[1],
                    1,
                    Rc::new(WindowIndex::new(s[2], s[3], 3, (2, 3))?),
                )?;
                a2ssm_forward(&v[0], &sla, &dla, &p.bind(ctx))
            },
        ),
        params_suite(
            AS,
            "vanilla_ssm_forward",
            &[&[1, 4, 5, 6]],
            Coverage::Sample(SAMPLED_COORDS),
            |pb| ScanProj::new(pb, "ssm", 4),
            |ctx, v, p| vanilla_ssm_forward(&v[0], &p.bind(ctx)),
        ),
        params_suite(
            MB,
            "mass_forward",
            &[&[1, 8, 6, 7]],
            Coverage::Sample(16),
            |pb| MassParams::new(pb, "mass", 8, 4, 3, MixerConfig::default()),
            |ctx, v, p| mass_forward(ctx, &v[0], p),
        ),
        params_suite(
            MB,
            "conv_ffn",
            &[&[1, 4, 5, 5]],
            Coverage::Sample(SAMPLED_COORDS),
            |pb| ConvFfnParams::new(pb, "ffn", 4, 2),
            |ctx, v, p| conv_ffn(ctx, &v[0], p),
        ),
        params_suite(
            MB,
            "a2mamba_block",
            &[&[1, 8, 7, 7]],
            Coverage::Sample(8),
            |pb| BlockParams::new(pb, "block", 8, 4, 3, 2, 0.0, MixerConfig::default()),
            |ctx, v, p| a2mamba_block(ctx, &v[0], p),
        ),
        GradSuite {
            module: MD,
            op: "forward_classify",
            shape: shape_label(&[1, 3, 32, 32]),
            run: Box::new(|seed| {
                let mut model = build_model(&ModelConfig::toy(), seed)?;
                perturb_parameters(&mut model.store, seed ^ 0x9e37, PARAM_NOISE);
                let x = SeededRng::derive(seed, 1).normal_tensor(&[1, 3, 32, 32], 1.0);
                check_directional_with_params(
                    &model.store,
                    &[x],
                    |ctx, v| forward_classify(ctx, &model, &v[0]),
                    seed,
                    MODEL_DIRECTIONS,
                )
            }),
        },
        params_suite(
            MR,
            "fuse_stages",
            &[
                &[1, 4, 16, 16],
                &[1, 8, 8, 8],
                &[1, 8, 4, 4],
                &[1, 16, 2, 2],
            ],
            Coverage::Sample(16),
            |pb| a2mamba::decoder::FuseParams::new(pb, "fuse", DECODER_STAGES, 8),
            |ctx, v, p| {
                fuse_stages(
                    ctx,
                    &[v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone()],
                    p,
                )
            },
        ),
        params_suite(
            MR,
            "rep_conv",
            &[&[1, 3, 9, 9]],
            Coverage::Sample(SAMPLED_COORDS),
            |pb| RepConvParams::new(pb, "shortcut", 3),
            |ctx, v, p| rep_conv(ctx, &v[0], p),
        ),
        params_suite(
            MR,
            "mm_refine",
            &[&[1, 8, 8, 8]],
            Coverage::Sample(8),
            |pb| RefineParams::new(pb, "refine", &decoder_cfg()),
            |ctx, v, p| mm_refine(ctx, &v[0], p),
        ),
        GradSuite {
            module: MR,
            op: "segman_v2_decode",
            shape: shape_label(&[1, 4, 16, 16]),
            run: Box::new(|seed| {
                let mut d = build_decoder(&decoder_cfg(), DECODER_STAGES, seed)?;
                perturb_parameters(&mut d.store, seed ^ 0x9e37, PARAM_NOISE);
                let mut rng = SeededRng::derive(seed, 1);
                let feats: Vec<Tensor> = (0..4)
                    .map(|s| rng.normal_tensor(&[1, DECODER_STAGES[s], 16 >> s, 16 >> s], 1.0))
                    .collect();
                check_with_params(
                    &d.store,
                    &feats,
                    |ctx, v| {
                        segman_v2_decode(
                            ctx,
                            &[v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone()],
                            &d,
                        )
                    },
                    seed,
                    Coverage::Sample(4),
                )
            }),
        },
    ]
}

#[derive(Debug)]
pub struct UnknownFilter(pub String);

impl std::fmt::Display for UnknownFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "unknown filter {:?}; expected \"all\", a module ({}) or an op name",
            self.0,
            MODULES.join(", ")
        )
    }
}

impl std::error::Error for UnknownFilter {}

/// Suites matching `filter`: `"all"`, a module name or an op name.
pub fn select(filter: &str) -> std::result::Result<Vec<GradSuite>, UnknownFilter> {
    let chosen: Vec<GradSuite> = registry()
        .into_iter()
        .filter(|s| filter == "all" || s.module == filter || s.op == filter)
        .collect();
    if chosen.is_empty() {
        Err(UnknownFilter(filter.to_string()))
    } else {
        Ok(chosen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub module: &'static str,
    pub op: &'static str,
    pub shape: String,
    /// Largest error over every trial.
    pub max_rel_err: f64,
    pub trials: usize,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= a2mamba::fdcheck::TOLERANCE
    }
}

/// Runs each suite `trials` times with per-trial seeds derived from `seed`.
pub fn run_suites(
    suites: &[GradSuite],
    seed: u64,
    trials: usize,
    mut progress: impl FnMut(&GradRow),
) -> Result<Vec<GradRow>> {
    let mut rows = Vec::with_capacity(suites.len());
    for (i, suite) in suites.iter().enumerate() {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let trial_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((i * 1000 + t) as u64);
            let r = suite.run(trial_seed)?;
            // NaN must not be swallowed by max.
            worst = if r.max_rel_err.is_nan() {
                f64::NAN
            } else {
                worst.max(r.max_rel_err)
            };
        }
        let row = GradRow {
            module: suite.module,
            op: suite.op,
            shape: suite.shape.clone(),
            max_rel_err: worst,
            trials,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn csv(rows: &[GradRow]) -> String {
    let mut s = String::from("op,shape,max_rel_err\n");
    for r in rows {
        writeln!(s, "{},{},{:.6e}", r.op, r.shape, r.max_rel_err).unwrap();
    }
    s
}
