//! Slice-level scan kernels.
//!
//! All buffers are row-major. For a batch of `s` sequences of length `l`
//! over `d` channels with state size `n`:
//!
//! * `u`, `delta`, `y`: `[s, l, d]`
//! * `a`: `[d, n]` (the continuous, negative diagonal of `A`)
//! * `b`, `c`: `[s, l, n]`
//! * `skip`: `[d]`
//!
//! The recurrence per channel `d` and state index `n` is
//! `h_k = exp(Δ_k a) h_{k-1} + Δ_k B_k u_k`, `y_k = <C_k, h_k> + skip u_k`
//! with `h_{-1} = 0`.

use rayon::prelude::*;

use crate::tensor::Element;

/// Block length of the two-pass parallel scan.
pub const SCAN_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

#[derive(Clone, Copy)]
pub struct ScanBuffers<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub skip: &'a [T],
}

/// Element of the linear-recurrence monoid: the map `h ↦ decay·h + input`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElem<T> {
    pub decay: T,
    pub input: T,
}

impl<T: Element> ScanElem<T> {
    pub fn identity() -> Self {
        Self {
            decay: T::one(),
            input: T::zero(),
        }
    }

    /// `later ∘ self`: apply `self` first, then `later`.
    /// `(a₂,b₂)∘(a₁,b₁) = (a₁a₂, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, later: Self) -> Self {
        Self {
            decay: self.decay * later.decay,
            input: later.decay * self.input + later.input,
        }
    }

    #[inline]
    pub fn apply(self, h: T) -> T {
        self.decay * h + self.input
    }
}

impl ScanDims {
    fn check<T>(&self, x: &ScanBuffers<'_, T>) {
        let ld = self.seqs * self.len * self.channels;
        let ln = self.seqs * self.len * self.state;
        assert_eq!(x.u.len(), ld);
        assert_eq!(x.delta.len(), ld);
        assert_eq!(x.a.len(), self.channels * self.state);
        assert_eq!(x.b.len(), ln);
        assert_eq!(x.c.len(), ln);
        assert_eq!(x.skip.len(), self.channels);
    }

    fn seq<'a, T>(&self, x: &ScanBuffers<'a, T>, s: usize) -> ScanBuffers<'a, T> {
        let ld = self.len * self.channels;
        let ln = self.len * self.state;
        ScanBuffers {
            u: &x.u[s * ld..(s + 1) * ld],
            delta: &x.delta[s * ld..(s + 1) * ld],
            a: x.a,
            b: &x.b[s * ln..(s + 1) * ln],
            c: &x.c[s * ln..(s + 1) * ln],
            skip: x.skip,
        }
    }
}

const LANES: usize = 8;

/// Sum with `LANES` interleaved partial sums, combined in a fixed order.
#[inline(always)]
fn lane_sum<T: Element>(n: usize, f: impl Fn(usize) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let full = n - n % LANES;
    for base in (0..full).step_by(LANES) {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += f(base + j);
        }
    }
    let mut total = T::zero();
    for a in acc {
        total += a;
    }
    for i in full..n {
        total += f(i);
    }
    total
}

#[inline(always)]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    lane_sum(n, |i| a[i] * b[i])
}

/// Reference recurrence: one pass over `k`, strictly left to right, no threads.
pub fn scan_sequential<T: Element>(dims: ScanDims, x: ScanBuffers<'_, T>) -> Vec<T> {
    dims.check(&x);
    let mut y = vec![T::zero(); dims.seqs * dims.len * dims.channels];
    let ld = dims.len * dims.channels;
    for s in 0..dims.seqs {
        sequential_one(&dims, &dims.seq(&x, s), &mut y[s * ld..(s + 1) * ld]);
    }
    y
}

fn sequential_one<T: Element>(dims: &ScanDims, x: &ScanBuffers<'_, T>, y: &mut [T]) {
    let (dd, nn) = (dims.channels, dims.state);
    let mut h = vec![T::zero(); dd * nn];
    for k in 0..dims.len {
        let bk = &x.b[k * nn..(k + 1) * nn];
        let ck = &x.c[k * nn..(k + 1) * nn];
        for d in 0..dd {
            let dt = x.delta[k * dd + d];
            let uk = x.u[k * dd + d];
            let du = dt * uk;
            let ad = &x.a[d * nn..(d + 1) * nn];
            let hd = &mut h[d * nn..(d + 1) * nn];
            for ((h, &a), &b) in hd.iter_mut().zip(ad).zip(bk) {
                *h = (dt * a).exp_kernel() * *h + du * b;
            }
            y[k * dd + d] = dot(ck, hd) + x.skip[d] * uk;
        }
    }
}

/// Same recurrence evaluated as a blocked prefix scan over [`ScanElem`].
///
/// Schedule, per sequence:
/// 1. reduce: each block of [`SCAN_BLOCK`] steps folds its elements left to
///    right into one aggregate per `(channel, state)`;
/// 2. carry: aggregates are applied left to right to obtain each block's
///    incoming state;
/// 3. downsweep: each block replays its elements from the incoming state and
///    emits outputs.
///
/// Steps 1 and 3 run block-parallel; the combination order is fixed, so the
/// result does not depend on the number of threads.
pub fn scan_parallel<T: Element>(dims: ScanDims, x: ScanBuffers<'_, T>) -> Vec<T> {
    dims.check(&x);
    let ld = dims.len * dims.channels;
    let mut y = vec![T::zero(); dims.seqs * ld];
    y.par_chunks_mut(ld.max(1))
        .enumerate()
        .for_each(|(s, ys)| parallel_one(&dims, &dims.seq(&x, s), ys));
    y
}

fn parallel_one<T: Element>(dims: &ScanDims, x: &ScanBuffers<'_, T>, y: &mut [T]) {
    let (dd, nn, len) = (dims.channels, dims.state, dims.len);
    let blocks = len.div_ceil(SCAN_BLOCK);
    let elem = |k: usize, d: usize, n: usize| {
        let dt = x.delta[k * dd + d];
        ScanElem {
            decay: (dt * x.a[d * nn + n]).exp_kernel(),
            input: dt * x.b[k * nn + n] * x.u[k * dd + d],
        }
    };

    let aggregates: Vec<Vec<ScanElem<T>>> = (0..blocks)
        .into_par_iter()
        .map(|j| {
            let mut agg = vec![ScanElem::identity(); dd * nn];
            for k in j * SCAN_BLOCK..((j + 1) * SCAN_BLOCK).min(len) {
                for d in 0..dd {
                    for n in 0..nn {
                        agg[d * nn + n] = agg[d * nn + n].then(elem(k, d, n));
                    }
                }
            }
            agg
        })
        .collect();

    let mut carries = Vec::with_capacity(blocks);
    let mut carry = vec![T::zero(); dd * nn];
    for agg in &aggregates {
        carries.push(carry.clone());
        for (h, e) in carry.iter_mut().zip(agg) {
            *h = e.apply(*h);
        }
    }

    y.par_chunks_mut(SCAN_BLOCK * dd)
        .zip(carries.into_par_iter())
        .enumerate()
        .for_each(|(j, (yb, mut h))| {
            for (kk, yrow) in yb.chunks_exact_mut(dd).enumerate() {
                let k = j * SCAN_BLOCK + kk;
                for (d, yv) in yrow.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for n in 0..nn {
                        let i = d * nn + n;
                        h[i] = elem(k, d, n).apply(h[i]);
                        acc += x.c[k * nn + n] * h[i];
                    }
                    *yv = acc + x.skip[d] * x.u[k * dd + d];
                }
            }
        });
}

/// Gradients of a scan with respect to all of its inputs.
#[derive(Debug, Clone)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    /// With respect to the continuous `a` (not its log-parameterization).
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub skip: Vec<T>,
}

/// Reverse-mode pass of the recurrence for output gradient `gy: [s, l, d]`.
///
/// States are recomputed per sequence. Per-sequence contributions to the
/// shared `a` and `skip` gradients are summed in sequence order.
pub fn scan_backward<T: Element>(dims: ScanDims, x: ScanBuffers<'_, T>, gy: &[T]) -> ScanGrads<T> {
    dims.check(&x);
    let ld = dims.len * dims.channels;
    let ln = dims.len * dims.state;
    let dn = dims.channels * dims.state;
    assert_eq!(gy.len(), dims.seqs * ld);

    let parts: Vec<_> = (0..dims.seqs)
        .into_par_iter()
        .map(|s| backward_one(&dims, &dims.seq(&x, s), &gy[s * ld..(s + 1) * ld]))
        .collect();

    let mut out = ScanGrads {
        u: Vec::with_capacity(dims.seqs * ld),
        delta: Vec::with_capacity(dims.seqs * ld),
        a: vec![T::zero(); dn],
        b: Vec::with_capacity(dims.seqs * ln),
        c: Vec::with_capacity(dims.seqs * ln),
        skip: vec![T::zero(); dims.channels],
    };
    for p in parts {
        out.u.extend(p.u);
        out.delta.extend(p.delta);
        out.b.extend(p.b);
        out.c.extend(p.c);
        for (acc, v) in out.a.iter_mut().zip(p.a) {
            *acc += v;
        }
        for (acc, v) in out.skip.iter_mut().zip(p.skip) {
            *acc += v;
        }
    }
    out
}

fn backward_one<T: Element>(dims: &ScanDims, x: &ScanBuffers<'_, T>, gy: &[T]) -> ScanGrads<T> {
    let (len, dd, nn) = (dims.len, dims.channels, dims.state);
    let dn = dd * nn;
    // decay[k] and h[k] for every step, [l, d, n]
    let mut decay = vec![T::zero(); len * dn];
    let mut hs = vec![T::zero(); len * dn];
    let zeros = vec![T::zero(); dn];
    for k in 0..len {
        let (done, rest) = hs.split_at_mut(k * dn);
        let prev = if k == 0 { &zeros[..] } else { &done[(k - 1) * dn..] };
        let cur = &mut rest[..dn];
        let dec = &mut decay[k * dn..(k + 1) * dn];
        let bk = &x.b[k * nn..(k + 1) * nn];
        for d in 0..dd {
            let dt = x.delta[k * dd + d];
            let du = dt * x.u[k * dd + d];
            let r = d * nn..(d + 1) * nn;
            let (h, p, a, ad) = (&mut cur[r.clone()], &prev[r.clone()], &mut dec[r.clone()], &x.a[r]);
            for n in 0..nn {
                a[n] = (dt * ad[n]).exp_kernel();
                h[n] = a[n] * p[n] + du * bk[n];
            }
        }
    }

    let mut g = ScanGrads {
        u: vec![T::zero(); len * dd],
        delta: vec![T::zero(); len * dd],
        a: vec![T::zero(); dn],
        b: vec![T::zero(); len * nn],
        c: vec![T::zero(); len * nn],
        skip: vec![T::zero(); dd],
    };
    // adjoint carried from step k+1 into h_k, already multiplied by decay[k+1]
    let mut carry = vec![T::zero(); dn];
    let mut gh = vec![T::zero(); nn];
    let mut gdec = vec![T::zero(); nn];
    for k in (0..len).rev() {
        let bk = &x.b[k * nn..(k + 1) * nn];
        let ck = &x.c[k * nn..(k + 1) * nn];
        let hk = &hs[k * dn..(k + 1) * dn];
        let hprev = if k == 0 { &zeros[..] } else { &hs[(k - 1) * dn..k * dn] };
        let deck = &decay[k * dn..(k + 1) * dn];
        let gbk = &mut g.b[k * nn..(k + 1) * nn];
        let gck = &mut g.c[k * nn..(k + 1) * nn];
        for d in 0..dd {
            let gyk = gy[k * dd + d];
            let dt = x.delta[k * dd + d];
            let uk = x.u[k * dd + d];
            let du = dt * uk;
            let r = d * nn..(d + 1) * nn;
            let (cr, hr, pr, dr, ar) = (
                &mut carry[r.clone()],
                &hk[r.clone()],
                &hprev[r.clone()],
                &deck[r.clone()],
                &x.a[r.clone()],
            );
            for n in 0..nn {
                let v = cr[n] + ck[n] * gyk;
                gh[n] = v;
                gdec[n] = v * pr[n] * dr[n];
                cr[n] = v * dr[n];
                gck[n] += gyk * hr[n];
                gbk[n] += v * du;
            }
            let ga = &mut g.a[r];
            for n in 0..nn {
                ga[n] += gdec[n] * dt;
            }
            let gdt = lane_sum(nn, |n| gdec[n] * ar[n] + gh[n] * bk[n] * uk);
            let gu = lane_sum(nn, |n| gh[n] * bk[n]) * dt;
            g.skip[d] += gyk * uk;
            g.delta[k * dd + d] = gdt;
            g.u[k * dd + d] = gu + gyk * x.skip[d];
        }
    }
    g
}
