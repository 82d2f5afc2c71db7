use crate::autodiff::{Graph, ParamBuilder, Var};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::tensor::Element;

/// `Linear_out(LN(y) ⊙ SiLU(Linear_g(LN(z)))) + residual`.
///
/// `y` has the inner width, `z` and `residual` the model width.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub norm_y: LayerNorm,
    pub norm_z: LayerNorm,
    pub gate: Linear,
    pub out: Linear,
}

impl Gate {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, inner: usize) -> Self {
        pb.scope(name, |pb| Self {
            norm_y: LayerNorm::new(pb, "norm_y", inner),
            norm_z: LayerNorm::new(pb, "norm_z", dim),
            gate: Linear::new(pb, "gate", dim, inner, true),
            out: Linear::new(pb, "out", inner, dim, true),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, y: Var, z: Var, residual: Var) -> Result<Var> {
        let yn = self.norm_y.forward(g, y)?;
        let zn = self.norm_z.forward(g, z)?;
        let zg = self.gate.forward(g, zn)?;
        let w = g.silu(zg);
        let h = g.mul(yn, w);
        let o = self.out.forward(g, h)?;
        Ok(g.add(o, residual))
    }
}
