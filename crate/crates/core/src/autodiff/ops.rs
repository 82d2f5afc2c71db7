use std::rc::Rc;

use super::{BackwardArgs, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// `(rows, cols)` view of a tensor whose trailing axis is the channel axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if cols == 0 { 0 } else { n / cols }, cols)
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Interpolation taps for one axis of an align-corners-false bilinear resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: f64,
    pub w_hi: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = src - lo as f64;
            Taps {
                lo,
                hi,
                w_lo: 1.0 - w_hi,
                w_hi,
            }
        })
        .collect()
}

/// Geometry of a depthwise convolution over three leading axes `[A, B, C, ch]`.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    dims: [usize; 3],
    ch: usize,
    kdims: [usize; 3],
    /// Input index = output index + tap - offset.
    offs: [usize; 3],
}

impl ConvGeom {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [da, db, dc] = self.dims;
        let [ka, kb, kc] = self.kdims;
        let [oa, ob, oc] = self.offs;
        for a in 0..da {
            for b in 0..db {
                for c in 0..dc {
                    let out = ((a * db + b) * dc + c) * self.ch;
                    for ta in 0..ka {
                        let Some(ia) = (a + ta).checked_sub(oa).filter(|&i| i < da) else {
                            continue;
                        };
                        for tb in 0..kb {
                            let Some(ib) = (b + tb).checked_sub(ob).filter(|&i| i < db) else {
                                continue;
                            };
                            for tc in 0..kc {
                                let Some(ic) = (c + tc).checked_sub(oc).filter(|&i| i < dc) else {
                                    continue;
                                };
                                let inp = ((ia * db + ib) * dc + ic) * self.ch;
                                let k = ((ta * kb + tb) * kc + tc) * self.ch;
                                f(out, inp, k);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'s, T: Element> Graph<'s, T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        let value = self.value(x).map(f);
        self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let xs = a.parents[0].data();
                let ys = a.output.data();
                let data = xs
                    .iter()
                    .zip(ys)
                    .zip(a.grad.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(a.output.shape().to_vec(), data).unwrap())]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add: operand shapes differ");
        self.push(
            value,
            &[a, b],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad.clone()), Some(a.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub: operand shapes differ");
        self.push(
            value,
            &[a, b],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: operand shapes differ");
        self.push(
            value,
            &[a, b],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let g = a.grad;
                let ga = a.needs[0].then(|| g.zip_map(a.parents[1], |g, y| g * y).unwrap());
                let gb = a.needs[1].then(|| g.zip_map(a.parents[0], |g, x| g * x).unwrap());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = self.value(x).scale(s);
        self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(a.grad.scale(s))]),
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(Tensor::full(shape.clone(), a.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let old = self.shape(x).to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(a.grad.reshape(old.clone()).unwrap())]),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(a.grad.permute(&inverse).unwrap())]),
        ))
    }

    pub fn reverse_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).reverse_axis(axis)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(a.grad.reverse_axis(axis).unwrap())]),
        ))
    }

    /// `x · w + b` over the trailing axis; `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, din) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != din {
            return Err(shape_err(format!("linear: input {xs:?} with weight {ws:?}")));
        }
        let dout = ws[1];
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err(format!("linear: bias {:?}, expected [{dout}]", bv.shape())));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let value = Tensor::new(out_shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.data();
                let xv = a.parents[0];
                let wv = a.parents[1];
                let gx = a.needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * din];
                    T::gemm_strided(
                        rows,
                        dout,
                        din,
                        g,
                        (dout as isize, 1),
                        wv.data(),
                        (1, dout as isize),
                        T::zero(),
                        &mut gx,
                    );
                    Tensor::new(xv.shape().to_vec(), gx).unwrap()
                });
                let gw = a.needs[1].then(|| {
                    let mut gw = vec![T::zero(); din * dout];
                    T::gemm_strided(
                        din,
                        rows,
                        dout,
                        xv.data(),
                        (1, din as isize),
                        g,
                        (dout as isize, 1),
                        T::zero(),
                        &mut gw,
                    );
                    Tensor::new(vec![din, dout], gw).unwrap()
                });
                let mut res = vec![gx, gw];
                if a.parents.len() == 3 {
                    let gb = a.needs[2].then(|| {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.chunks_exact(dout) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::new(vec![dout], gb).unwrap()
                    });
                    res.push(gb);
                }
                res
            }),
        ))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, c) = rows_cols(&xs);
        if c == 0 {
            return Err(shape_err("layer_norm: channel axis has size 0"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!(
                "layer_norm: affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::of(eps);
        let inv_c = T::one() / T::of(c as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let xv = a.parents[0].data();
                let gv = a.parents[1].data();
                let g = a.grad.data();
                let mut gx = vec![T::zero(); rows * c];
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = row.iter().copied().sum::<T>() * inv_c;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                    let rstd = T::one() / (var + eps).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        let gh = gr[j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat[j];
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        gx[r * c + j] = rstd * (gr[j] * gv[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    Some(Tensor::new(a.parents[0].shape().to_vec(), gx).unwrap()),
                    Some(Tensor::new(vec![c], ggamma).unwrap()),
                    Some(Tensor::new(vec![c], gbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Stacks rank-≥1 tensors with equal trailing extent into `[Σ rows, C]`.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows: no inputs"));
        }
        let c = self.value(xs[0]).last_dim();
        let mut data = Vec::new();
        let mut splits = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.last_dim() != c {
                return Err(shape_err(format!(
                    "concat_rows: trailing extents {} vs {}",
                    v.last_dim(),
                    c
                )));
            }
            splits.push((data.len(), v.numel(), v.shape().to_vec()));
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c.max(1);
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(
            value,
            xs,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                splits
                    .iter()
                    .zip(&a.needs)
                    .map(|((start, n, shape), &need)| {
                        need.then(|| Tensor::new(shape.clone(), a.grad.data()[*start..start + n].to_vec()).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..end` of `x` viewed as `[rows, C]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = rows_cols(&shape);
        if start > end || end > rows {
            return Err(shape_err(format!("slice_rows {start}..{end} of {rows}")));
        }
        let value = Tensor::new(vec![end - start, c], self.value(x).data()[start * c..end * c].to_vec())?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = Tensor::zeros(shape.clone());
                g.data_mut()[start * c..end * c].copy_from_slice(a.grad.data());
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if xs.len() != ys.len() || xs[..xs.len() - 1] != ys[..ys.len() - 1] {
            return Err(shape_err(format!("concat_last: {xs:?} with {ys:?}")));
        }
        let (rows, ca) = rows_cols(&xs);
        let cb = *ys.last().unwrap();
        let xv = self.value(x).data();
        let yv = self.value(y).data();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&xv[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&yv[r * cb..(r + 1) * cb]);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            &[x, y],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.data();
                let mut gx = Vec::with_capacity(rows * ca);
                let mut gy = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    gx.extend_from_slice(&row[..ca]);
                    gy.extend_from_slice(&row[ca..]);
                }
                vec![
                    Some(Tensor::new(xs.clone(), gx).unwrap()),
                    Some(Tensor::new(ys.clone(), gy).unwrap()),
                ]
            }),
        ))
    }

    /// `out[q] = x[index[q]]` over rows of `x` viewed as `[rows, C]`; output `[index.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, c) = rows_cols(&shape);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!("gather_rows: index {bad} >= {rows}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); rows * c];
                scatter_add(&mut g, a.grad.data(), &index, c);
                vec![Some(Tensor::new(shape.clone(), g).unwrap())]
            }),
        ))
    }

    /// `out[index[q]] += x[q]`; output `[rows, C]`. Rows are summed in increasing `q`.
    pub fn scatter_rows(&mut self, x: Var, index: Rc<[usize]>, rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c) = rows_cols(&shape);
        if n != index.len() {
            return Err(shape_err(format!(
                "scatter_rows: {n} rows with {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!("scatter_rows: index {bad} >= {rows}")));
        }
        let mut out = vec![T::zero(); rows * c];
        scatter_add(&mut out, self.value(x).data(), &index, c);
        let value = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.data();
                let mut gx = Vec::with_capacity(n * c);
                for &i in index.iter() {
                    gx.extend_from_slice(&g[i * c..(i + 1) * c]);
                }
                vec![Some(Tensor::new(shape.clone(), gx).unwrap())]
            }),
        ))
    }

    fn depthwise(&mut self, x: Var, k: Var, b: Var, geom: ConvGeom, out_shape: Vec<usize>) -> Var {
        let ch = geom.ch;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); xv.len()];
        for row in out.chunks_exact_mut(ch) {
            row.copy_from_slice(bv);
        }
        geom.for_each_tap(|o, i, t| {
            let (dst, src, w) = (&mut out[o..o + ch], &xv[i..i + ch], &kv[t..t + ch]);
            for j in 0..ch {
                dst[j] += w[j] * src[j];
            }
        });
        let value = Tensor::new(out_shape, out).unwrap();
        self.push(
            value,
            &[x, k, b],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.data();
                let xv = a.parents[0].data();
                let kv = a.parents[1].data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                geom.for_each_tap(|o, i, t| {
                    for j in 0..ch {
                        gx[i + j] += kv[t + j] * g[o + j];
                        gk[t + j] += xv[i + j] * g[o + j];
                    }
                });
                let mut gb = vec![T::zero(); ch];
                for row in g.chunks_exact(ch) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(Tensor::new(a.parents[0].shape().to_vec(), gx).unwrap()),
                    Some(Tensor::new(a.parents[1].shape().to_vec(), gk).unwrap()),
                    Some(Tensor::new(vec![ch], gb).unwrap()),
                ]
            }),
        )
    }

    fn check_conv(&self, x: Var, k: Var, b: Var, krank: usize) -> Result<usize> {
        let xs = self.shape(x);
        let ks = self.shape(k);
        let c = xs.last().copied().unwrap_or(0);
        if ks.len() != krank || ks[krank - 1] != c || self.shape(b) != [c] {
            return Err(shape_err(format!(
                "depthwise conv: input {xs:?}, kernel {ks:?}, bias {:?}",
                self.shape(b)
            )));
        }
        Ok(c)
    }

    /// Depthwise causal convolution along time, `x: [T, C]`, `k: [K, C]`.
    /// `y_t = b + Σ_j k[j] · x[t - (K-1) + j]`.
    pub fn causal_conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err(format!("causal_conv1d: input {:?}", self.shape(x))));
        }
        let c = self.check_conv(x, k, b, 2)?;
        let kt = self.shape(k)[0];
        if kt < 1 {
            return Err(Error::Invalid("causal_conv1d: kernel width < 1".into()));
        }
        let t = self.shape(x)[0];
        let geom = ConvGeom {
            dims: [t, 1, 1],
            ch: c,
            kdims: [kt, 1, 1],
            offs: [kt - 1, 0, 0],
        };
        Ok(self.depthwise(x, k, b, geom, vec![t, c]))
    }

    /// Per-frame depthwise 2D convolution with "same" zero padding,
    /// `x: [T, H, W, C]`, `k: [kh, kw, C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let c = self.check_conv(x, k, b, 3)?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("depthwise_conv2d: input {xs:?}")));
        }
        if ks[0].is_multiple_of(2) || ks[1].is_multiple_of(2) {
            return Err(Error::Invalid(format!("depthwise_conv2d: even kernel {ks:?}")));
        }
        let geom = ConvGeom {
            dims: [xs[0], xs[1], xs[2]],
            ch: c,
            kdims: [1, ks[0], ks[1]],
            offs: [0, ks[0] / 2, ks[1] / 2],
        };
        Ok(self.depthwise(x, k, b, geom, xs))
    }

    /// Depthwise 3D convolution over `(T, H, W)` with "same" zero padding,
    /// `x: [T, H, W, C]`, `k: [kt, kh, kw, C]`.
    pub fn depthwise_conv3d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let c = self.check_conv(x, k, b, 4)?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("depthwise_conv3d: input {xs:?}")));
        }
        if ks[..3].iter().any(|&e| e % 2 == 0) {
            return Err(Error::Invalid(format!("depthwise_conv3d: even kernel {ks:?}")));
        }
        let geom = ConvGeom {
            dims: [xs[0], xs[1], xs[2]],
            ch: c,
            kdims: [ks[0], ks[1], ks[2]],
            offs: [ks[0] / 2, ks[1] / 2, ks[2] / 2],
        };
        Ok(self.depthwise(x, k, b, geom, xs))
    }

    /// Bilinear resize of `[T, H, W, C]` to `[T, oh, ow, C]` (align-corners false).
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] == 0 || xs[2] == 0 {
            return Err(shape_err(format!("upsample_bilinear: input {xs:?}")));
        }
        let (t, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let plan = Rc::new(ResizePlan { t, h, w, c, ty, tx });
        let out = plan.forward(self.value(x).data());
        let value = Tensor::new(vec![t, oh, ow, c], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                vec![Some(
                    Tensor::new(a.parents[0].shape().to_vec(), plan.backward(a.grad.data())).unwrap(),
                )]
            }),
        ))
    }

    /// Per-frame inner product `out[t, y, x] = <feat[t, y, x, :], query[t, :]>`.
    pub fn frame_dot(&mut self, feat: Var, query: Var) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        let qs = self.shape(query).to_vec();
        if fs.len() != 4 || qs != [fs[0], fs[3]] {
            return Err(shape_err(format!("frame_dot: features {fs:?}, query {qs:?}")));
        }
        let (t, p, c) = (fs[0], fs[1] * fs[2], fs[3]);
        let fv = self.value(feat).data();
        let qv = self.value(query).data();
        let mut out = vec![T::zero(); t * p];
        for ti in 0..t {
            let q = &qv[ti * c..(ti + 1) * c];
            for pi in 0..p {
                let f = &fv[(ti * p + pi) * c..(ti * p + pi + 1) * c];
                out[ti * p + pi] = f.iter().zip(q).map(|(&a, &b)| a * b).sum();
            }
        }
        let value = Tensor::new(vec![fs[0], fs[1], fs[2], 1], out)?;
        Ok(self.push(
            value,
            &[feat, query],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let fv = a.parents[0].data();
                let qv = a.parents[1].data();
                let g = a.grad.data();
                let mut gf = vec![T::zero(); fv.len()];
                let mut gq = vec![T::zero(); qv.len()];
                for ti in 0..t {
                    for pi in 0..p {
                        let gv = g[ti * p + pi];
                        let base = (ti * p + pi) * c;
                        for j in 0..c {
                            gf[base + j] = gv * qv[ti * c + j];
                            gq[ti * c + j] += gv * fv[base + j];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(a.parents[0].shape().to_vec(), gf).unwrap()),
                    Some(Tensor::new(a.parents[1].shape().to_vec(), gq).unwrap()),
                ]
            }),
        ))
    }

    /// Soft dice loss on sigmoid probabilities, one term per frame, averaged
    /// over frames with positive weight. `logits` and `target` are `[T, ...]`.
    pub fn dice_loss(&mut self, logits: Var, target: &Tensor<T>, frame_weight: &[f64]) -> Result<Var> {
        const SMOOTH: f64 = 1.0;
        let ls = self.shape(logits).to_vec();
        if ls != target.shape() || ls.is_empty() || ls[0] != frame_weight.len() {
            return Err(shape_err(format!(
                "dice_loss: logits {ls:?}, target {:?}, {} frame weights",
                target.shape(),
                frame_weight.len()
            )));
        }
        let frames = ls[0];
        let per = target.numel() / frames.max(1);
        let wsum: f64 = frame_weight.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Invalid("dice_loss: no valid frames".into()));
        }
        let lv = self.value(logits).data();
        let tv = target.data();
        let probs: Vec<f64> = lv.iter().map(|&v| sigmoid(v).as_f64()).collect();
        let mut loss = 0.0;
        let mut stats = Vec::with_capacity(frames);
        for f in 0..frames {
            let p = &probs[f * per..(f + 1) * per];
            let t = &tv[f * per..(f + 1) * per];
            let inter: f64 = p.iter().zip(t).map(|(&p, &t)| p * t.as_f64()).sum();
            let union: f64 = p.iter().sum::<f64>() + t.iter().map(|v| v.as_f64()).sum::<f64>();
            stats.push((inter, union));
            loss += frame_weight[f] * (1.0 - (2.0 * inter + SMOOTH) / (union + SMOOTH));
        }
        loss /= wsum;
        let target = target.clone();
        let weights = frame_weight.to_vec();
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            &[logits],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.item().as_f64();
                let lv = a.parents[0].data();
                let tv = target.data();
                let mut gl = vec![T::zero(); lv.len()];
                for f in 0..frames {
                    let (inter, union) = stats[f];
                    let den = union + SMOOTH;
                    let scale = -g * weights[f] / wsum;
                    for i in f * per..(f + 1) * per {
                        let p = sigmoid(lv[i]).as_f64();
                        let dd = (2.0 * tv[i].as_f64() * den - (2.0 * inter + SMOOTH)) / (den * den);
                        gl[i] = T::of(scale * dd * p * (1.0 - p));
                    }
                }
                vec![Some(Tensor::new(a.parents[0].shape().to_vec(), gl).unwrap())]
            }),
        ))
    }

    /// Mean binary cross-entropy on logits over elements of frames with positive weight.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, frame_weight: &[f64]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls != target.shape() || ls.is_empty() || ls[0] != frame_weight.len() {
            return Err(shape_err(format!(
                "bce_with_logits: logits {ls:?}, target {:?}, {} frame weights",
                target.shape(),
                frame_weight.len()
            )));
        }
        let frames = ls[0];
        let per = target.numel() / frames.max(1);
        let norm: f64 = frame_weight.iter().sum::<f64>() * per as f64;
        if norm <= 0.0 {
            return Err(Error::Invalid("bce_with_logits: no valid frames".into()));
        }
        let lv = self.value(logits).data();
        let tv = target.data();
        let mut loss = 0.0;
        for f in 0..frames {
            for i in f * per..(f + 1) * per {
                let x = lv[i].as_f64();
                let t = tv[i].as_f64();
                loss += frame_weight[f] * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
            }
        }
        loss /= norm;
        let target = target.clone();
        let weights = frame_weight.to_vec();
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            &[logits],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let g = a.grad.item().as_f64();
                let lv = a.parents[0].data();
                let tv = target.data();
                let mut gl = vec![T::zero(); lv.len()];
                for f in 0..frames {
                    let s = g * weights[f] / norm;
                    for i in f * per..(f + 1) * per {
                        gl[i] = T::of(s * (sigmoid(lv[i].as_f64()) - tv[i].as_f64()));
                    }
                }
                vec![Some(Tensor::new(a.parents[0].shape().to_vec(), gl).unwrap())]
            }),
        ))
    }
}

fn scatter_add<T: Element>(dst: &mut [T], src: &[T], index: &[usize], c: usize) {
    for (q, &i) in index.iter().enumerate() {
        let d = &mut dst[i * c..(i + 1) * c];
        let s = &src[q * c..(q + 1) * c];
        for j in 0..c {
            d[j] += s[j];
        }
    }
}

struct ResizePlan {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    ty: Vec<Taps>,
    tx: Vec<Taps>,
}

impl ResizePlan {
    fn forward<T: Element>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow, c) = (self.ty.len(), self.tx.len(), self.c);
        let mut out = vec![T::zero(); self.t * oh * ow * c];
        for t in 0..self.t {
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let o = ((t * oh + oy) * ow + ox) * c;
                    for (yy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                        for (xx, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                            let wgt = T::of(wy * wx);
                            let i = ((t * self.h + yy) * self.w + xx) * c;
                            for j in 0..c {
                                out[o + j] += wgt * x[i + j];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward<T: Element>(&self, g: &[T]) -> Vec<T> {
        let (oh, ow, c) = (self.ty.len(), self.tx.len(), self.c);
        let mut gx = vec![T::zero(); self.t * self.h * self.w * c];
        for t in 0..self.t {
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let o = ((t * oh + oy) * ow + ox) * c;
                    for (yy, wy) in [(ty.lo, ty.w_lo), (ty.hi, ty.w_hi)] {
                        for (xx, wx) in [(tx.lo, tx.w_lo), (tx.hi, tx.w_hi)] {
                            let wgt = T::of(wy * wx);
                            let i = ((t * self.h + yy) * self.w + xx) * c;
                            for j in 0..c {
                                gx[i + j] += wgt * g[o + j];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Bilinear resize of a plain `[T, H, W, C]` tensor, outside any graph.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err(format!("resize_bilinear: input {s:?}")));
    }
    let plan = ResizePlan {
        t: s[0],
        h: s[1],
        w: s[2],
        c: s[3],
        ty: bilinear_taps(s[1], oh),
        tx: bilinear_taps(s[2], ow),
    };
    Tensor::new(vec![s[0], oh, ow, s[3]], plan.forward(x.data()))
}
