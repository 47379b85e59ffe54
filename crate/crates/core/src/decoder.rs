//! Segmentation decoder: stage fusion, the multi-scale refinement module and
//! low-level enhancement.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::block::{
    conv_ffn, covering_window, mass_forward, AttentionKind, ConvFfnParams, MassParams, MixerConfig,
    SsmKind,
};
use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv};
use crate::model::{forward_features, Model};
use crate::ops::{
    add, bilinear_resize, broadcast_spatial, concat_channels, gelu, global_avg_pool,
    pixel_unshuffle, Conv2dSpec,
};
use crate::params::{Ctx, ParamBuilder, ParameterStore};
use crate::rng::SeededRng;
use crate::tensor::{write_a2t1, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Width `C` of the fused map.
    pub channels: usize,
    /// Width of the projected stage-1 features.
    pub low_channels: usize,
    pub num_classes: usize,
    /// Heads of the global attention inside the refinement module, which
    /// runs at width `3C / 2`.
    pub heads: usize,
    pub ffn_expansion: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 128,
            low_channels: 48,
            num_classes: 150,
            heads: 4,
            ffn_expansion: 2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::config(
                "channels",
                format!("{c} must be positive and even"),
            ));
        }
        if self.heads == 0 || !(3 * c / 2).is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "{} channels do not split into {} heads",
                    3 * c / 2,
                    self.heads
                ),
            ));
        }
        if self.low_channels == 0 || self.num_classes == 0 || self.ffn_expansion == 0 {
            return Err(Error::config(
                "decoder",
                "widths, classes and expansion must be positive",
            ));
        }
        Ok(())
    }

    /// Width of each of the three context branches.
    pub fn branch_channels(&self) -> usize {
        self.channels / 2
    }
}

#[derive(Debug, Clone)]
pub struct FuseParams {
    /// 1×1 projections of stages 2, 3 and 4 to `C`.
    pub proj: [Conv; 3],
    pub fuse: Conv,
}

impl FuseParams {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        stage_channels: [usize; 4],
        c: usize,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(FuseParams {
            proj: [
                Conv::pointwise(&mut s, "proj2", stage_channels[1], c, true)?,
                Conv::pointwise(&mut s, "proj3", stage_channels[2], c, true)?,
                Conv::pointwise(&mut s, "proj4", stage_channels[3], c, true)?,
            ],
            fuse: Conv::pointwise(&mut s, "fuse", 3 * c, c, true)?,
        })
    }
}

/// Parallel depthwise 5×5, dilated 5×5 (rate 2), 3×3 and identity branches,
/// summed and kept unmerged.
#[derive(Debug, Clone)]
pub struct RepConvParams {
    pub dense5: Conv,
    pub dilated5: Conv,
    pub dense3: Conv,
}

impl RepConvParams {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(RepConvParams {
            dense5: Conv::depthwise(&mut s, "dense5", c, 5, 1)?,
            dilated5: Conv::depthwise(&mut s, "dilated5", c, 5, 2)?,
            dense3: Conv::depthwise(&mut s, "dense3", c, 3, 1)?,
        })
    }
}

pub fn rep_conv<'t>(ctx: &Ctx<'t>, x: &Var<'t>, p: &RepConvParams) -> Result<Var<'t>> {
    let y = add(&p.dense5.forward(ctx, x)?, &p.dilated5.forward(ctx, x)?)?;
    let y = add(&y, &p.dense3.forward(ctx, x)?)?;
    add(&y, x)
}

#[derive(Debug, Clone)]
pub struct RefineParams {
    pub b1_reduce: Conv,
    pub b1_down: Conv,
    pub b2_down: Conv,
    pub b2_conv: Conv,
    pub b2_reduce: Conv,
    pub norm1: ChannelNorm,
    pub mass: MassParams,
    pub norm2: ChannelNorm,
    pub ffn: ConvFfnParams,
    pub shortcut: RepConvParams,
}

/// Global attention feeding the attention-augmented scan, with the gate.
pub fn refine_mixer() -> MixerConfig {
    MixerConfig {
        attention: AttentionKind::Global,
        ssm: SsmKind::A2ssm,
        gate: true,
    }
}

impl RefineParams {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.channels;
        let cb = cfg.branch_channels();
        let s2 = Conv2dSpec::strided(3, 2);
        let mut s = pb.scope(name);
        Ok(RefineParams {
            b1_reduce: Conv::pointwise(&mut s, "b1_reduce", 4 * c, cb, true)?,
            b1_down: Conv::new(&mut s, "b1_down", cb, cb, 3, s2, true)?,
            b2_down: Conv::new(&mut s, "b2_down", c, cb, 3, s2, true)?,
            b2_conv: Conv::new(&mut s, "b2_conv", cb, cb, 3, s2, true)?,
            b2_reduce: Conv::pointwise(&mut s, "b2_reduce", 4 * cb, cb, true)?,
            norm1: ChannelNorm::new(&mut s, "norm1", 3 * cb)?,
            mass: MassParams::new(&mut s, "mass", 3 * cb, cfg.heads, 0, refine_mixer())?,
            norm2: ChannelNorm::new(&mut s, "norm2", 3 * cb)?,
            ffn: ConvFfnParams::with_output(&mut s, "ffn", 3 * cb, c, cfg.ffn_expansion)?,
            shortcut: RepConvParams::new(&mut s, "shortcut", c)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub store: ParameterStore,
    pub fuse: FuseParams,
    pub refine: RefineParams,
    /// Mixes `[GAP(F), F, refine(F)]` back to `C`.
    pub context: Conv,
    pub low: Conv,
    pub low_fuse: Conv,
    pub low_norm: ChannelNorm,
    pub classifier: Conv,
}

pub fn build_decoder(
    cfg: &DecoderConfig,
    stage_channels: [usize; 4],
    seed: u64,
) -> Result<Decoder> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::new(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let fuse = FuseParams::new(&mut pb, "fuse", stage_channels, c)?;
    let refine = RefineParams::new(&mut pb, "refine", cfg)?;
    let context = Conv::pointwise(&mut pb, "context", 3 * c, c, true)?;
    let low = Conv::pointwise(&mut pb, "low", stage_channels[0], cfg.low_channels, true)?;
    let low_fuse = Conv::pointwise(&mut pb, "low_fuse", c + cfg.low_channels, c, true)?;
    let low_norm = ChannelNorm::new(&mut pb, "low_norm", c)?;
    let classifier = Conv::pointwise(&mut pb, "classifier", c, cfg.num_classes, true)?;
    drop(pb);
    Ok(Decoder {
        config: cfg.clone(),
        store,
        fuse,
        refine,
        context,
        low,
        low_fuse,
        low_norm,
        classifier,
    })
}

fn spatial(x: &Var<'_>) -> (usize, usize) {
    let s = x.shape();
    (s[2], s[3])
}

/// Stages 2–4 projected to `C`, resized to the stage-2 grid, concatenated
/// and mixed by a 1×1 convolution.
pub fn fuse_stages<'t>(ctx: &Ctx<'t>, feats: &[Var<'t>; 4], p: &FuseParams) -> Result<Var<'t>> {
    let n = feats[0].shape()[0];
    if let Some(f) = feats
        .iter()
        .find(|f| f.shape().len() != 4 || f.shape()[0] != n)
    {
        return Err(Error::contract(
            "fuse_stages",
            format!(
                "stage features disagree on batch: {n} vs shape {:?}",
                f.shape()
            ),
        ));
    }
    let (h, w) = spatial(&feats[1]);
    let mut parts = Vec::with_capacity(3);
    for (f, proj) in feats[1..].iter().zip(&p.proj) {
        let y = proj.forward(ctx, f)?;
        parts.push(if spatial(&y) == (h, w) {
            y
        } else {
            bilinear_resize(&y, h, w)?
        });
    }
    p.fuse
        .forward(ctx, &concat_channels(&parts.iter().collect::<Vec<_>>())?)
}

/// Intermediate values of [`mm_refine`].
pub struct RefineTrace<'t> {
    /// Pixel-unshuffled input of the first branch, before any convolution.
    pub unshuffled: Var<'t>,
    pub f1: Var<'t>,
    pub f2: Var<'t>,
    pub f3: Var<'t>,
    /// Context path after the FFN, before upsampling.
    pub context: Var<'t>,
    pub shortcut: Var<'t>,
    pub out: Var<'t>,
}

pub fn mm_refine_trace<'t>(
    ctx: &Ctx<'t>,
    f: &Var<'t>,
    p: &RefineParams,
) -> Result<RefineTrace<'t>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "mm_refine",
            "rank",
            format!("expected [N,C,H,W], got {s:?}"),
        ));
    }
    let (h, w) = (s[2], s[3]);
    if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(
            "mm_refine",
            "H,W",
            format!("{h}×{w} is not divisible by 4"),
        ));
    }
    let unshuffled = pixel_unshuffle(f, 2)?;
    let f1 = p
        .b1_down
        .forward(ctx, &p.b1_reduce.forward(ctx, &unshuffled)?)?;
    let fi = p.b2_down.forward(ctx, f)?;
    let f2 = p.b2_conv.forward(ctx, &fi)?;
    let f3 = p.b2_reduce.forward(ctx, &pixel_unshuffle(&fi, 2)?)?;
    let dims = [spatial(&f1), spatial(&f2), spatial(&f3)];
    if dims.iter().any(|&d| d != (h / 4, w / 4)) {
        return Err(Error::contract(
            "mm_refine",
            format!("context maps disagree on size: {dims:?}"),
        ));
    }
    let x = concat_channels(&[&f1, &f2, &f3])?;
    let x = add(&x, &mass_forward(ctx, &p.norm1.forward(ctx, &x)?, &p.mass)?)?;
    let context = conv_ffn(ctx, &p.norm2.forward(ctx, &x)?, &p.ffn)?;
    let shortcut = rep_conv(ctx, f, &p.shortcut)?;
    let out = add(&bilinear_resize(&context, h, w)?, &shortcut)?;
    Ok(RefineTrace {
        unshuffled,
        f1,
        f2,
        f3,
        context,
        shortcut,
        out,
    })
}

/// `[N, C, H, W] → [N, C, H, W]` with `H` and `W` divisible by 4.
pub fn mm_refine<'t>(ctx: &Ctx<'t>, f: &Var<'t>, p: &RefineParams) -> Result<Var<'t>> {
    Ok(mm_refine_trace(ctx, f, p)?.out)
}

/// Window size that makes the refinement attention global on an `h × w`
/// context map.
pub fn refine_window(h: usize, w: usize) -> usize {
    covering_window(h, w)
}

/// Stage features (strides 4, 8, 16, 32) to class logits at stride 4.
pub fn segman_v2_decode<'t>(ctx: &Ctx<'t>, feats: &[Var<'t>; 4], d: &Decoder) -> Result<Var<'t>> {
    let f = fuse_stages(ctx, feats, &d.fuse)?;
    let (h, w) = spatial(&f);
    let g = broadcast_spatial(&global_avg_pool(&f)?, h, w)?;
    let r = mm_refine(ctx, &f, &d.refine)?;
    let x = d.context.forward(ctx, &concat_channels(&[&g, &f, &r])?)?;
    let (h4, w4) = spatial(&feats[0]);
    let x = bilinear_resize(&x, h4, w4)?;
    let low = d.low.forward(ctx, &feats[0])?;
    let x = d.low_fuse.forward(ctx, &concat_channels(&[&x, &low])?)?;
    let x = gelu(&d.low_norm.forward(ctx, &x)?);
    d.classifier.forward(ctx, &x)
}

/// Evaluation-mode segmentation logits `[N, K, H/4, W/4]`.
pub fn segment(model: &Model, decoder: &Decoder, images: &Tensor) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let backbone = Ctx::eval(&tape, &model.store);
    let feats = forward_features(&backbone, model, &tape.constant(images.clone()))?;
    let head = Ctx::eval(&tape, &decoder.store);
    Ok(segman_v2_decode(&head, &feats, decoder)?.value().clone())
}

/// Per-pixel argmax of `[N, K, H, W]` logits as `N` row-major `H × W` maps.
pub fn class_index_maps(logits: &Tensor) -> Vec<Vec<u16>> {
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    (0..n)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let at = |c: usize| logits.data()[(b * k + c) * hw + p];
                    (0..k).fold(0, |best, c| if at(c) > at(best) { c } else { best }) as u16
                })
                .collect()
        })
        .collect()
}

/// Binary greymap (P5). Values above 255 are written as 16-bit big-endian.
pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    values: &[u16],
    maxval: u16,
) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::contract(
            "write_pgm",
            format!("{} values for a {width}×{height} image", values.len()),
        ));
    }
    let maxval = maxval.max(1);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{width} {height}\n{maxval}\n")?;
    for &v in values {
        let v = v.min(maxval);
        if maxval > 255 {
            out.write_all(&v.to_be_bytes())?;
        } else {
            out.write_all(&[v as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the class-index map of sample `index` as a greymap.
pub fn export_class_map(path: &Path, logits: &Tensor, index: usize) -> Result<()> {
    let s = logits.shape();
    let maps = class_index_maps(logits);
    let map = maps
        .get(index)
        .ok_or_else(|| Error::contract("export_class_map", format!("no sample {index}")))?;
    write_pgm(path, s[3], s[2], map, (s[1] - 1) as u16)
}

/// Writes a tensor as one A2T1 record.
pub fn export_a2t1(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_a2t1(&mut out, t)?;
    out.flush()?;
    Ok(())
}
