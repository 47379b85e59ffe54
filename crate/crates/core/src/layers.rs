//! Parameterized convolution and normalization layers.

use crate::autograd::Var;
use crate::error::Result;
use crate::ops::{conv2d, layer_norm_axis, Conv2dSpec};
use crate::params::{Ctx, ParamBuilder, ParamId};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    /// Square `k × k` kernel; weights `[cout, cin / groups, k, k]`.
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let mut s = pb.scope(name);
        let weight = s.weight("weight", &[cout, cin / spec.groups, k, k])?;
        let bias = if bias {
            Some(s.zeros("bias", &[cout])?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    pub fn pointwise(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(pb, name, cin, cout, 1, Conv2dSpec::pointwise(), bias)
    }

    pub fn depthwise(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c: usize,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        Self::new(
            pb,
            name,
            c,
            c,
            k,
            Conv2dSpec::depthwise(c, k, dilation),
            true,
        )
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let w = ctx.param(self.weight);
        let b = ctx.opt_param(self.bias);
        conv2d(x, &w, b.as_ref(), self.spec)
    }
}

/// Layer normalization of the channel vector at every spatial position.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(ChannelNorm {
            gamma: s.ones("weight", &[c])?,
            beta: s.zeros("bias", &[c])?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        layer_norm_axis(
            x,
            1,
            &ctx.param(self.gamma),
            &ctx.param(self.beta),
            NORM_EPS,
        )
    }
}
