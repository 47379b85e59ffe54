//! The four-stage backbone, its configurations, and effective receptive field
//! extraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{adaptive_dilation, WindowIndex};
use crate::autograd::{Tape, Var};
use crate::block::{
    a2mamba_block, covering_window, AttentionKind, BlockParams, MixerConfig, SsmKind,
};
use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv};
use crate::ops::{gelu, global_avg_pool, reshape, weighted_sum, Conv2dSpec};
use crate::params::{Ctx, ParamBuilder, ParameterStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Input spatial size must be a multiple of this.
pub const RESOLUTION_MULTIPLE: usize = 32;
pub const IN_CHANNELS: usize = 3;

fn default_expansion() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    pub window_sizes: [usize; 4],
    pub num_classes: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    /// Largest stochastic-depth rate; block `i` of `D` uses `rate · i / (D − 1)`.
    #[serde(default)]
    pub drop_path: f64,
    /// Width of the hidden layer between pooling and the classifier, if any.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default)]
    pub mixer: MixerConfig,
}

const PRESET_WINDOWS: [usize; 4] = [11, 9, 7, 7];
const IMAGENET_CLASSES: usize = 1000;
const HEAD_HIDDEN: usize = 1024;

impl ModelConfig {
    fn sized(channels: [usize; 4], blocks: [usize; 4], heads: [usize; 4], drop_path: f64) -> Self {
        ModelConfig {
            channels,
            blocks,
            heads,
            window_sizes: PRESET_WINDOWS,
            num_classes: IMAGENET_CLASSES,
            ffn_expansion: 4,
            drop_path,
            head_hidden: Some(HEAD_HIDDEN),
            mixer: MixerConfig::default(),
        }
    }

    pub fn nano() -> Self {
        Self::sized([32, 64, 128, 192], [2, 2, 8, 2], [2, 2, 4, 8], 0.05)
    }

    pub fn tiny() -> Self {
        Self::sized([48, 96, 256, 448], [2, 2, 10, 2], [2, 4, 8, 16], 0.1)
    }

    pub fn small() -> Self {
        Self::sized([64, 128, 320, 512], [2, 4, 12, 4], [2, 4, 10, 16], 0.2)
    }

    pub fn base() -> Self {
        Self::sized([96, 192, 384, 512], [4, 6, 12, 6], [4, 8, 12, 16], 0.4)
    }

    pub fn large() -> Self {
        Self::sized([112, 224, 512, 720], [4, 6, 12, 6], [4, 8, 16, 30], 0.5)
    }

    /// Desk-scale model for the synthetic task.
    pub fn toy() -> Self {
        ModelConfig {
            channels: [8, 16, 32, 64],
            blocks: [1, 1, 1, 1],
            heads: [2, 2, 4, 8],
            window_sizes: PRESET_WINDOWS,
            num_classes: 10,
            ffn_expansion: 4,
            drop_path: 0.05,
            head_hidden: None,
            mixer: MixerConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "nano" => Self::nano(),
            "tiny" => Self::tiny(),
            "small" => Self::small(),
            "base" => Self::base(),
            "large" => Self::large(),
            "toy" => Self::toy(),
            _ => return None,
        })
    }

    pub fn with_mixer(mut self, mixer: MixerConfig) -> Self {
        self.mixer = mixer;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            let (c, g, k) = (self.channels[i], self.heads[i], self.window_sizes[i]);
            if c == 0 || g == 0 {
                return Err(Error::config(
                    format!("channels[{i}]"),
                    "channels and heads must be positive",
                ));
            }
            let split = match self.mixer.attention {
                AttentionKind::MultiScale => 2 * g,
                AttentionKind::Global => g,
            };
            if c % split != 0 {
                return Err(Error::config(
                    format!("channels[{i}]"),
                    format!("{c} is not divisible by {split} (heads[{i}] = {g})"),
                ));
            }
            if self.mixer.attention == AttentionKind::MultiScale && g % 2 != 0 {
                return Err(Error::config(
                    format!("heads[{i}]"),
                    format!("{g} heads cannot be split into two branches"),
                ));
            }
            if k % 2 == 0 {
                return Err(Error::config(
                    format!("window_sizes[{i}]"),
                    format!("{k} is not odd"),
                ));
            }
            if self.blocks[i] == 0 {
                return Err(Error::config(
                    format!("blocks[{i}]"),
                    "every stage needs at least one block",
                ));
            }
        }
        if self.channels[0] < 2 {
            return Err(Error::config(
                "channels[0]",
                "the stem needs at least two channels",
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("ffn_expansion", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(
                "drop_path",
                format!("{} outside [0, 1)", self.drop_path),
            ));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::config(
                "head_hidden",
                "must be positive when present",
            ));
        }
        Ok(())
    }

    /// Per-stage DLA dilation for an `h × w` input.
    pub fn stage_dilations(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        std::array::from_fn(|i| {
            let f = 1 << (i + 2);
            adaptive_dilation(h / f, w / f, self.window_sizes[i])
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv1: Conv,
    pub norm: ChannelNorm,
    pub conv2: Conv,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub norm: ChannelNorm,
    pub hidden: Option<Conv>,
    pub fc: Conv,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub stem: Stem,
    /// Stride-2 convolutions entering stages 2, 3 and 4.
    pub transitions: Vec<Conv>,
    pub stages: Vec<Vec<BlockParams>>,
    pub head: Head,
}

/// Builds and initializes a model. Weights are truncated normal (std 0.02),
/// biases zero, norms identity, `a_log = 0` and `D = 1`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::new(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let c = cfg.channels;
    let stem = {
        let mut s = pb.scope("stem");
        Stem {
            conv1: Conv::new(
                &mut s,
                "conv1",
                IN_CHANNELS,
                c[0] / 2,
                3,
                Conv2dSpec::strided(3, 2),
                true,
            )?,
            norm: ChannelNorm::new(&mut s, "norm", c[0] / 2)?,
            conv2: Conv::new(
                &mut s,
                "conv2",
                c[0] / 2,
                c[0],
                3,
                Conv2dSpec::strided(3, 2),
                true,
            )?,
        }
    };
    let depth: usize = cfg.blocks.iter().sum();
    let rate = |i: usize| {
        if depth > 1 {
            cfg.drop_path * i as f64 / (depth - 1) as f64
        } else {
            0.0
        }
    };
    let mut transitions = Vec::with_capacity(3);
    let mut stages = Vec::with_capacity(4);
    let mut block_index = 0;
    for s in 0..4 {
        let mut scope = pb.scope(&format!("stage{}", s + 1));
        if s > 0 {
            transitions.push(Conv::new(
                &mut scope,
                "down",
                c[s - 1],
                c[s],
                3,
                Conv2dSpec::strided(3, 2),
                true,
            )?);
        }
        let mut blocks = Vec::with_capacity(cfg.blocks[s]);
        for b in 0..cfg.blocks[s] {
            blocks.push(BlockParams::new(
                &mut scope,
                &format!("block{}", b + 1),
                c[s],
                cfg.heads[s],
                cfg.window_sizes[s],
                cfg.ffn_expansion,
                rate(block_index),
                cfg.mixer,
            )?);
            block_index += 1;
        }
        stages.push(blocks);
    }
    let head = {
        let mut s = pb.scope("head");
        let norm = ChannelNorm::new(&mut s, "norm", c[3])?;
        let hidden = match cfg.head_hidden {
            Some(hd) => Some(Conv::pointwise(&mut s, "hidden", c[3], hd, true)?),
            None => None,
        };
        let fc = Conv::pointwise(
            &mut s,
            "fc",
            cfg.head_hidden.unwrap_or(c[3]),
            cfg.num_classes,
            true,
        )?;
        Head { norm, hidden, fc }
    };
    drop(pb);
    Ok(Model {
        config: cfg.clone(),
        store,
        stem,
        transitions,
        stages,
        head,
    })
}

pub fn param_count(model: &Model) -> usize {
    model.store.count()
}

fn check_images(images: &Var<'_>) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::dim(
            "forward",
            "rank",
            format!("expected [N,3,H,W], got {s:?}"),
        ));
    }
    if s[1] != IN_CHANNELS {
        return Err(Error::dim(
            "forward",
            "C",
            format!("expected {IN_CHANNELS} channels, got {}", s[1]),
        ));
    }
    if !s[2].is_multiple_of(RESOLUTION_MULTIPLE)
        || !s[3].is_multiple_of(RESOLUTION_MULTIPLE)
        || s[2] == 0
        || s[3] == 0
    {
        return Err(Error::Resolution {
            height: s[2],
            width: s[3],
            multiple: RESOLUTION_MULTIPLE,
        });
    }
    Ok((s[0], s[2], s[3]))
}

/// Outputs of the four stages at strides 4, 8, 16 and 32.
pub fn forward_features<'t>(
    ctx: &Ctx<'t>,
    model: &Model,
    images: &Var<'t>,
) -> Result<[Var<'t>; 4]> {
    check_images(images)?;
    let x = model.stem.conv1.forward(ctx, images)?;
    let x = gelu(&model.stem.norm.forward(ctx, &x)?);
    let mut x = model.stem.conv2.forward(ctx, &x)?;
    let mut feats = Vec::with_capacity(4);
    for (s, blocks) in model.stages.iter().enumerate() {
        if s > 0 {
            x = model.transitions[s - 1].forward(ctx, &x)?;
        }
        for b in blocks {
            x = a2mamba_block(ctx, &x, b)?;
        }
        feats.push(x.clone());
    }
    Ok(feats.try_into().expect("four stages"))
}

/// `[N, 3, H, W] → [N, num_classes]`.
pub fn forward_classify<'t>(ctx: &Ctx<'t>, model: &Model, images: &Var<'t>) -> Result<Var<'t>> {
    let (n, _, _) = check_images(images)?;
    let [.., f4] = forward_features(ctx, model, images)?;
    let x = global_avg_pool(&model.head.norm.forward(ctx, &f4)?)?;
    let x = match &model.head.hidden {
        Some(h) => gelu(&h.forward(ctx, &x)?),
        None => x,
    };
    let logits = model.head.fc.forward(ctx, &x)?;
    reshape(&logits, &[n, model.config.num_classes])
}

impl Model {
    /// Evaluation-mode logits without recording a graph.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &self.store);
        Ok(
            forward_classify(&ctx, self, &tape.constant(images.clone()))?
                .value()
                .clone(),
        )
    }
}

/// Input-gradient magnitude of the channel sum of the final stage's center
/// position, averaged over batch and input channels and scaled to max 1.
pub fn erf_map(model: &Model, images: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &model.store);
    let x = tape.leaf(images.clone());
    let [.., f4] = forward_features(&ctx, model, &x)?;
    let s = f4.shape().to_vec();
    let (ci, cj) = (s[2] / 2, s[3] / 2);
    let sel = Tensor::from_fn(&s, |f| {
        f64::from(u8::from((f / s[3]) % s[2] == ci && f % s[3] == cj))
    });
    let target = weighted_sum(&f4, &sel)?;
    let grads = tape.backward(&target)?;
    let g = grads.get_or_zeros(&x);
    let (n, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut map = Tensor::zeros(&[h, w]);
    for b in 0..n {
        for ch in 0..c {
            let plane = &g.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for (m, v) in map.data_mut().iter_mut().zip(plane) {
                *m += v.abs() / (n * c) as f64;
            }
        }
    }
    let peak = map.max_abs();
    if peak > 0.0 {
        map = map.map(|v| v / peak);
    }
    Ok(map)
}

/// Share of entries above `threshold`.
pub fn support_fraction(map: &Tensor, threshold: f64) -> f64 {
    map.data().iter().filter(|&&v| v > threshold).count() as f64 / map.numel().max(1) as f64
}

/// Closed interval of positions along one axis.
type Span = (usize, usize);

fn strided_conv_reach(span: Span, len_in: usize) -> Span {
    // 3×3 stride 2 padding 1: output o reads inputs 2o − 1 ..= 2o + 1.
    (
        (2 * span.0).saturating_sub(1),
        (2 * span.1 + 1).min(len_in - 1),
    )
}

fn conv3_reach(span: Span, len: usize) -> Span {
    (span.0.saturating_sub(1), (span.1 + 1).min(len - 1))
}

/// Hull of every window source of the queries in `span`, along one axis.
fn window_reach(span: Span, idx: &WindowIndex, rows: bool) -> Span {
    let (mut lo, mut hi) = (usize::MAX, 0);
    for q in span.0..=span.1 {
        let (i, j) = if rows { (q, 0) } else { (0, q) };
        for src in idx.window(i, j).into_iter().flatten() {
            let p = if rows { src.0 } else { src.1 };
            lo = lo.min(p);
            hi = hi.max(p);
        }
    }
    (lo.min(span.0), hi.max(span.1))
}

/// Rectangle of input pixels that can influence the final stage's center
/// position, by interval propagation through every layer. Models with a
/// state space branch reach the whole image through the scan.
pub fn erf_reach_bound(cfg: &ModelConfig, h: usize, w: usize) -> (Span, Span) {
    let full = ((0, h - 1), (0, w - 1));
    if cfg.mixer.ssm != SsmKind::None {
        return full;
    }
    let dims: Vec<(usize, usize)> = (0..4).map(|s| (h >> (s + 2), w >> (s + 2))).collect();
    let (h4, w4) = dims[3];
    let mut rs: Span = (h4 / 2, h4 / 2);
    let mut cs: Span = (w4 / 2, w4 / 2);
    for s in (0..4).rev() {
        let (hs, ws) = dims[s];
        let k = cfg.window_sizes[s];
        let windows: Vec<WindowIndex> = match cfg.mixer.attention {
            AttentionKind::MultiScale => vec![
                WindowIndex::new(hs, ws, k, (1, 1)).expect("odd window"),
                WindowIndex::new(hs, ws, k, adaptive_dilation(hs, ws, k)).expect("odd window"),
            ],
            AttentionKind::Global => {
                vec![WindowIndex::new(hs, ws, covering_window(hs, ws), (1, 1)).expect("odd window")]
            }
        };
        for _ in 0..cfg.blocks[s] {
            // FFN depthwise, then the mixer, then the residual depthwise.
            rs = conv3_reach(rs, hs);
            cs = conv3_reach(cs, ws);
            let (r0, c0) = (rs, cs);
            for idx in &windows {
                let (r, c) = (window_reach(r0, idx, true), window_reach(c0, idx, false));
                rs = (rs.0.min(r.0), rs.1.max(r.1));
                cs = (cs.0.min(c.0), cs.1.max(c.1));
            }
            rs = conv3_reach(rs, hs);
            cs = conv3_reach(cs, ws);
        }
        let (hp, wp) = if s > 0 { dims[s - 1] } else { (h / 2, w / 2) };
        rs = strided_conv_reach(rs, hp);
        cs = strided_conv_reach(cs, wp);
    }
    // Stem: two stride-2 convolutions; the loop above applied the second.
    (strided_conv_reach(rs, h), strided_conv_reach(cs, w))
}

/// Fraction of an `h × w` image inside [`erf_reach_bound`].
pub fn erf_reach_fraction(cfg: &ModelConfig, h: usize, w: usize) -> f64 {
    let ((r0, r1), (c0, c1)) = erf_reach_bound(cfg, h, w);
    ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64 / (h * w) as f64
}
