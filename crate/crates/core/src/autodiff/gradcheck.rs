//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64`: each sampled coordinate is perturbed by `±step`, the loss
//! is re-evaluated on a fresh graph, and the difference quotient is compared
//! with the gradient from [`Graph::backward`].

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.coords.is_empty() && self.coords.iter().all(|c| c.rel_err < self.tolerance)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `count` coordinates drawn uniformly over all parameter elements
/// (with replacement), optionally restricted to parameters matching `filter`.
pub fn sample_coords(
    store: &ParamStore<f64>,
    count: usize,
    rng: &mut Rng,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let eligible: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| filter(&p.name) && p.value.numel() > 0)
        .map(|(id, p)| (id, p.value.numel()))
        .collect();
    let total: usize = eligible.iter().map(|e| e.1).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let mut k = rng.below(0, total);
            for &(id, n) in &eligible {
                if k < n {
                    return (id, k);
                }
                k -= n;
            }
            unreachable!()
        })
        .collect()
}

/// Compares analytic and central-difference gradients of `loss` at `coords`.
pub fn check<F>(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    opts: GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck loss".into()));
        }
        Ok(v)
    };

    let mut out = Vec::with_capacity(coords.len());
    for &(id, index) in coords {
        let analytic = grads.get(id).map(|g| g.data()[index]).unwrap_or(0.0);
        let orig = store.value(id).data()[index];
        store.get_mut(id).value.data_mut()[index] = orig + opts.step;
        let plus = eval(store);
        store.get_mut(id).value.data_mut()[index] = orig - opts.step;
        let minus = eval(store);
        store.get_mut(id).value.data_mut()[index] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.step);
        out.push(CoordCheck {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, opts.floor),
        });
    }
    Ok(GradCheckReport {
        coords: out,
        tolerance: opts.tolerance,
    })
}
