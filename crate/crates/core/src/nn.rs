//! Parameter bundles for the standard layers.

use crate::autodiff::{Graph, ParamBuilder, ParamId, Var};
use crate::error::Result;
use crate::tensor::Element;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weights `U(-1/√din, 1/√din)`, zero bias.
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        pb.scope(name, |pb| {
            let w = pb.uniform("w", &[din, dout], 1.0 / (din as f64).sqrt());
            let b = bias.then(|| pb.zeros("b", &[dout]));
            Self { w, b }
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| Self {
            gamma: pb.ones("gamma", &[dim]),
            beta: pb.zeros("beta", &[dim]),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Depthwise convolution weights; the kernel shape decides 1D/2D/3D.
#[derive(Debug, Clone, Copy)]
pub struct DwConv {
    pub k: ParamId,
    pub b: ParamId,
}

impl DwConv {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, kernel: &[usize], channels: usize) -> Self {
        let taps: usize = kernel.iter().product();
        let mut shape = kernel.to_vec();
        shape.push(channels);
        pb.scope(name, |pb| Self {
            k: pb.uniform("k", &shape, 1.0 / (taps as f64).sqrt()),
            b: pb.zeros("b", &[channels]),
        })
    }

    /// `x: [T, C]`, causal along `T`.
    pub fn causal1d<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.k), g.param(self.b));
        g.causal_conv1d(x, k, b)
    }

    /// `x: [T, H, W, C]`, per frame.
    pub fn conv2d<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.k), g.param(self.b));
        g.depthwise_conv2d(x, k, b)
    }

    /// `x: [T, H, W, C]`, across frames.
    pub fn conv3d<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.k), g.param(self.b));
        g.depthwise_conv3d(x, k, b)
    }
}
