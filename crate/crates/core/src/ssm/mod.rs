//! Selective state-space scan: discretization, the two scan kernels, the
//! differentiable scan op, the input-dependent projections and the output gate.

mod gate;
pub mod kernel;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use gate::Gate;
pub use kernel::{ScanBuffers, ScanDims, ScanElem, ScanGrads, SCAN_BLOCK};

use crate::autodiff::{softplus, BackwardArgs, Graph, ParamBuilder, ParamId, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Element, Tensor};

/// Which kernel evaluates the recurrence. Both give the same result up to
/// floating-point reassociation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanImpl {
    #[default]
    Sequential,
    Parallel,
}

impl ScanImpl {
    pub fn name(self) -> &'static str {
        match self {
            ScanImpl::Sequential => "sequential",
            ScanImpl::Parallel => "parallel",
        }
    }

    pub fn run<T: Element>(self, dims: ScanDims, x: ScanBuffers<'_, T>) -> Vec<T> {
        match self {
            ScanImpl::Sequential => kernel::scan_sequential(dims, x),
            ScanImpl::Parallel => kernel::scan_parallel(dims, x),
        }
    }
}

/// Zero-order-hold decay `exp(Δa)` and simplified input matrix `ΔB`.
///
/// `delta: [L, D]`, `a: [D, N]`, `b: [L, N]`; returns two `[L, D, N]` tensors.
pub fn discretize<T: Element>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (l, d) = match delta.shape() {
        [l, d] => (*l, *d),
        s => return Err(Error::Shape(format!("discretize: delta {s:?}, expected [L, D]"))),
    };
    let n = a.last_dim();
    if a.shape() != [d, n] || b.shape() != [l, n] {
        return Err(Error::Shape(format!(
            "discretize: delta {:?}, a {:?}, b {:?}",
            delta.shape(),
            a.shape(),
            b.shape()
        )));
    }
    check_delta(delta.data())?;
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for k in 0..l {
        for c in 0..d {
            let dt = delta.data()[k * d + c];
            for s in 0..n {
                abar.push((dt * a.data()[c * n + s]).exp());
                bbar.push(dt * b.data()[k * n + s]);
            }
        }
    }
    Ok((Tensor::new([l, d, n], abar)?, Tensor::new([l, d, n], bbar)?))
}

fn check_delta<T: Element>(delta: &[T]) -> Result<()> {
    match delta.iter().find(|v| !(v.is_finite() && **v > T::zero())) {
        Some(v) => Err(Error::Invalid(format!(
            "step size must be positive and finite, got {v}"
        ))),
        None => Ok(()),
    }
}

/// Inputs of one scan evaluation.
///
/// Either a single sequence (`u, delta: [L, D]`, `b, c: [L, N]`) or a batch
/// (`u, delta: [S, L, D]`, `b, c: [S, L, N]`); `a: [D, N]` holds the negative
/// continuous diagonal and `skip: [D]` the per-channel feedthrough.
#[derive(Debug, Clone)]
pub struct ScanProblem<T> {
    pub u: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub skip: Tensor<T>,
}

impl<T: Element> ScanProblem<T> {
    pub fn dims(&self) -> Result<ScanDims> {
        scan_dims(
            self.u.shape(),
            self.delta.shape(),
            self.a.shape(),
            self.b.shape(),
            self.c.shape(),
            self.skip.shape(),
        )
    }

    pub fn buffers(&self) -> ScanBuffers<'_, T> {
        ScanBuffers {
            u: self.u.data(),
            delta: self.delta.data(),
            a: self.a.data(),
            b: self.b.data(),
            c: self.c.data(),
            skip: self.skip.data(),
        }
    }

    /// Output with the shape of `u`.
    pub fn run(&self, imp: ScanImpl) -> Result<Tensor<T>> {
        let dims = self.dims()?;
        check_delta(self.delta.data())?;
        Tensor::new(self.u.shape().to_vec(), imp.run(dims, self.buffers()))
    }
}

pub fn scan_sequential<T: Element>(p: &ScanProblem<T>) -> Result<Tensor<T>> {
    p.run(ScanImpl::Sequential)
}

pub fn scan_parallel<T: Element>(p: &ScanProblem<T>) -> Result<Tensor<T>> {
    p.run(ScanImpl::Parallel)
}

fn scan_dims(u: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize], skip: &[usize]) -> Result<ScanDims> {
    let (seqs, len, channels) = match *u {
        [l, d] => (1, l, d),
        [s, l, d] => (s, l, d),
        _ => return Err(Error::Shape(format!("scan: u {u:?}, expected [L, D] or [S, L, D]"))),
    };
    let state = a.last().copied().unwrap_or(0);
    let bc: Vec<usize> = u[..u.len() - 1].iter().copied().chain([state]).collect();
    if delta != u || a != [channels, state] || b != bc.as_slice() || c != bc.as_slice() || skip != [channels] {
        return Err(Error::Shape(format!(
            "scan: u {u:?}, delta {delta:?}, a {a:?}, b {b:?}, c {c:?}, skip {skip:?}"
        )));
    }
    Ok(ScanDims {
        seqs,
        len,
        channels,
        state,
    })
}

impl<T: Element> Graph<'_, T> {
    /// Differentiable scan with `A = -exp(a_log)`.
    ///
    /// `u, delta: [S, L, D]`, `a_log: [D, N]`, `b, c: [S, L, N]`, `skip: [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        skip: Var,
        imp: ScanImpl,
    ) -> Result<Var> {
        let dims = scan_dims(
            self.shape(u),
            self.shape(delta),
            self.shape(a_log),
            self.shape(b),
            self.shape(c),
            self.shape(skip),
        )?;
        check_delta(self.value(delta).data())?;
        let a: Rc<Vec<T>> = Rc::new(self.value(a_log).data().iter().map(|v| -v.exp()).collect());
        let y = imp.run(
            dims,
            ScanBuffers {
                u: self.value(u).data(),
                delta: self.value(delta).data(),
                a: &a,
                b: self.value(b).data(),
                c: self.value(c).data(),
                skip: self.value(skip).data(),
            },
        );
        let value = Tensor::new(self.shape(u).to_vec(), y)?;
        Ok(self.push(
            value,
            &[u, delta, a_log, b, c, skip],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let p = &args.parents;
                let g = kernel::scan_backward(
                    dims,
                    ScanBuffers {
                        u: p[0].data(),
                        delta: p[1].data(),
                        a: &a,
                        b: p[3].data(),
                        c: p[4].data(),
                        skip: p[5].data(),
                    },
                    args.grad.data(),
                );
                let ga_log: Vec<T> = g.a.iter().zip(a.iter()).map(|(&ga, &av)| ga * av).collect();
                let wrap = |i: usize, v: Vec<T>| args.needs[i].then(|| Tensor::new(p[i].shape().to_vec(), v).unwrap());
                vec![
                    wrap(0, g.u),
                    wrap(1, g.delta),
                    wrap(2, ga_log),
                    wrap(3, g.b),
                    wrap(4, g.c),
                    wrap(5, g.skip),
                ]
            }),
        ))
    }
}

/// Smallest and largest initial step size.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Parameters of one selective state-space layer of inner width `D` and
/// state size `N`.
#[derive(Debug, Clone, Copy)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub skip: ParamId,
    pub dt: Linear,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub channels: usize,
    pub state: usize,
}

impl SsmParams {
    /// `a_log[d, n] = ln(n + 1)`, unit skip, step-size bias so that the initial
    /// `softplus(bias)` is log-uniform in [`DT_INIT_RANGE`].
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, state: usize) -> Self {
        pb.scope(name, |pb| {
            let a_log = pb.tensor(
                "a_log",
                Tensor::from_fn([channels, state], |i| T::of(((i % state) as f64 + 1.0).ln())),
            );
            let skip = pb.ones("skip", &[channels]);
            let (lo, hi) = DT_INIT_RANGE;
            let bias: Vec<T> = (0..channels)
                .map(|_| {
                    let dt = (lo.ln() + pb.rng().uniform() * (hi.ln() - lo.ln())).exp();
                    T::of(softplus_inv(dt))
                })
                .collect();
            let dt_w = pb.uniform("dt.w", &[channels, channels], 0.1 / (channels as f64).sqrt());
            let dt_b = pb.tensor("dt.b", Tensor::new([channels], bias).unwrap());
            let proj_b = Linear::new(pb, "proj_b", channels, state, false);
            let proj_c = Linear::new(pb, "proj_c", channels, state, false);
            Self {
                a_log,
                skip,
                dt: Linear { w: dt_w, b: Some(dt_b) },
                proj_b,
                proj_c,
                channels,
                state,
            }
        })
    }

    /// `u: [S, L, D]` → `[S, L, D]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, u: Var, imp: ScanImpl) -> Result<Var> {
        let pre = self.dt.forward(g, u)?;
        let delta = g.softplus(pre);
        let b = self.proj_b.forward(g, u)?;
        let c = self.proj_c.forward(g, u)?;
        let a_log = g.param(self.a_log);
        let skip = g.param(self.skip);
        g.selective_scan(u, delta, a_log, b, c, skip, imp)
    }
}

/// Step size `softplus(x)` on plain values, as used by [`SsmParams::forward`].
pub fn step_size<T: Element>(x: T) -> T {
    softplus(x)
}
