#![allow(dead_code)]

use std::rc::Rc;

use ssmavs::autodiff::gradcheck::{check, sample_coords, GradCheckOptions, GradCheckReport};
use ssmavs::autodiff::{Graph, ParamBuilder, ParamId, ParamStore, Var};
use ssmavs::blocks::{A2vBlock, BlockDims, V2aBlock, V2aLevel};
use ssmavs::layout::{direction_set, AudioAttach, Direction, Extent, LayoutKind, Order, ScanLayout, Token, PLANAR};
use ssmavs::rng::Rng;
use ssmavs::ssm::{ScanImpl, ScanProblem};
use ssmavs::tensor::max_rel_dev;
use ssmavs::{Element, Tensor};

pub const SCAN_INSTANCES: usize = 1000;
pub const SCAN_TOL_F32: f64 = 1e-5;
pub const SCAN_TOL_F64: f64 = 1e-12;
pub const LAYOUT_CASES: usize = 10_000;
pub const SENSITIVITY_PROBES: usize = 40;
pub const SENSITIVITY_RATE: f64 = 0.95;
pub const GRAD_COORDS: usize = 50;

/// Random scan instance with `L ≤ 1024`, `D ≤ 16`, `N ≤ 16` and one or two sequences.
pub fn scan_instance<T: Element>(rng: &mut Rng) -> ScanProblem<T> {
    let s = rng.below(1, 3);
    let l = rng.below(1, 1025);
    let d = rng.below(1, 17);
    let n = rng.below(1, 17);
    ScanProblem {
        u: Tensor::normal([s, l, d], 1.0, rng),
        delta: Tensor::uniform([s, l, d], 1e-3, 1.0, rng),
        a: Tensor::from_fn([d, n], |_| T::of(-(rng.uniform_range(-2.0, 2.5)).exp())),
        b: Tensor::normal([s, l, n], 1.0, rng),
        c: Tensor::normal([s, l, n], 1.0, rng),
        skip: Tensor::normal([d], 1.0, rng),
    }
}

/// Worst relative deviation of the parallel scan from the sequential scan
/// over `count` random instances, as `(f32, f64)`.
pub fn scan_oracle_sweep(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let p: ScanProblem<f64> = scan_instance(&mut rng);
        let seq = p.run(ScanImpl::Sequential).unwrap();
        let par = p.run(ScanImpl::Parallel).unwrap();
        w64 = w64.max(max_rel_dev(par.data(), seq.data(), 1e-300));
        let q = ScanProblem::<f32> {
            u: p.u.cast(),
            delta: p.delta.cast(),
            a: p.a.cast(),
            b: p.b.cast(),
            c: p.c.cast(),
            skip: p.skip.cast(),
        };
        let seq = q.run(ScanImpl::Sequential).unwrap();
        let par = q.run(ScanImpl::Parallel).unwrap();
        w32 = w32.max(max_rel_dev(par.data(), seq.data(), 1e-30));
    }
    (w32, w64)
}

/// Bitwise invariance of `y_{<k}` under perturbation of `u_{≥k}` in the
/// sequential scan, over `count` random instances. Returns the failures.
pub fn scan_causality_sweep(count: usize, seed: u64) -> usize {
    let mut rng = Rng::new(seed);
    let mut failures = 0;
    for _ in 0..count {
        let p: ScanProblem<f32> = scan_instance(&mut rng);
        let (s, l, d) = (p.u.shape()[0], p.u.shape()[1], p.u.shape()[2]);
        let k = rng.below(0, l);
        let base = p.run(ScanImpl::Sequential).unwrap();
        let mut q = p.clone();
        for si in 0..s {
            for t in k..l {
                for c in 0..d {
                    q.u.data_mut()[(si * l + t) * d + c] += rng.normal() as f32;
                }
            }
        }
        let out = q.run(ScanImpl::Sequential).unwrap();
        for si in 0..s {
            let a = &base.data()[si * l * d..(si * l + k) * d];
            let b = &out.data()[si * l * d..(si * l + k) * d];
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                failures += 1;
            }
        }
    }
    failures
}

/// Position of canonical row `r` inside sequence `dir` of an explicit
/// placement: every element is located by walking the axis order directly.
fn place_visual(
    dir: Direction,
    extents: &[Extent],
    frames: usize,
    scale: usize,
    t: usize,
    y: usize,
    x: usize,
) -> usize {
    let per_scale = |e: &Extent| frames * e.area();
    let before: usize = extents[..scale].iter().map(per_scale).sum();
    let e = extents[scale];
    let (dt, dh, dw) = (frames, e.h, e.w);
    let pos = match dir.order {
        Order::Thw => (t * dh + y) * dw + x,
        Order::Twh => (t * dw + x) * dh + y,
        Order::Hwt => (y * dw + x) * dt + t,
        Order::Wht => (x * dh + y) * dt + t,
        Order::Htw => (y * dt + t) * dw + x,
        Order::Wth => (x * dt + t) * dh + y,
        Order::Hw | Order::Wh => unreachable!(),
    };
    before + pos
}

/// Independent construction of a spatio-temporal sequence table without audio.
pub fn brute_force_spatiotemporal(extents: &[Extent], frames: usize, dirs: &[Direction]) -> Vec<usize> {
    let total: usize = extents.iter().map(|e| frames * e.area()).sum();
    let mut out = Vec::with_capacity(total * dirs.len());
    for &dir in dirs {
        let mut seq = vec![usize::MAX; total];
        let mut row = 0;
        for (s, e) in extents.iter().enumerate() {
            for t in 0..frames {
                for y in 0..e.h {
                    for x in 0..e.w {
                        let p = place_visual(dir, extents, frames, s, t, y, x);
                        let p = if dir.reversed { total - 1 - p } else { p };
                        seq[p] = row;
                        row += 1;
                    }
                }
            }
        }
        out.extend(seq);
    }
    out
}

/// One random layout configuration.
#[derive(Debug, Clone)]
pub struct LayoutCase {
    pub extents: Vec<Extent>,
    pub frames: usize,
    pub kind: LayoutKind,
    pub directions: usize,
    pub attach: AudioAttach,
    pub channels: usize,
}

impl LayoutCase {
    pub fn random(rng: &mut Rng) -> Self {
        let scales = rng.below(1, 4);
        let degenerate = rng.bernoulli(0.3);
        let extents = (0..scales)
            .map(|_| {
                if degenerate {
                    match rng.below(0, 3) {
                        0 => Extent::new(1, rng.below(1, 5)),
                        1 => Extent::new(rng.below(1, 5), 1),
                        _ => Extent::new(1, 1),
                    }
                } else {
                    Extent::new(rng.below(1, 6), rng.below(1, 6))
                }
            })
            .collect();
        let frames = if rng.bernoulli(0.25) { 1 } else { rng.below(1, 5) };
        let kind = if rng.bernoulli(0.5) {
            LayoutKind::PerFrame
        } else {
            LayoutKind::Spatiotemporal
        };
        let directions = ssmavs::layout::DIRECTION_COUNTS[rng.below(0, 6)];
        let attach = [AudioAttach::None, AudioAttach::Append, AudioAttach::Prepend][rng.below(0, 3)];
        Self {
            extents,
            frames,
            kind,
            directions,
            attach,
            channels: rng.below(1, 4),
        }
    }

    pub fn build(&self) -> ScanLayout {
        match self.kind {
            LayoutKind::PerFrame => ScanLayout::per_frame(&self.extents, self.frames, self.attach).unwrap(),
            LayoutKind::Spatiotemporal => ScanLayout::spatiotemporal(
                &self.extents,
                self.frames,
                &direction_set(self.directions).unwrap(),
                self.attach,
            )
            .unwrap(),
        }
    }
}

/// Checks one layout: per-direction unflatten inverts flatten bitwise, the
/// merge of all directions is `directions × rows`, every position decodes
/// to a token consistent with its row, and audio slots sit at the ends.
pub fn check_layout(case: &LayoutCase, rng: &mut Rng) -> Result<(), String> {
    let layout = case.build();
    layout.validate().map_err(|e| e.to_string())?;
    let rows: Tensor<f64> = Tensor::normal([layout.rows(), case.channels], 1.0, rng);
    let seqs = layout.flatten(&rows).map_err(|e| e.to_string())?;
    for d in 0..layout.directions().len() {
        let back = layout.unflatten(&seqs, d).map_err(|e| e.to_string())?;
        if !back.bit_eq(&rows) {
            return Err(format!("direction {d} does not round-trip"));
        }
    }
    let merged = layout.merge(&seqs).map_err(|e| e.to_string())?;
    let k = layout.directions().len() as f64;
    for (m, r) in merged.data().iter().zip(rows.data()) {
        if (m - k * r).abs() > 1e-9 * (1.0 + r.abs()) {
            return Err("merge is not the direction-count multiple".into());
        }
    }
    let visual = layout.visual_rows();
    for s in 0..layout.seqs() {
        for p in 0..layout.len() {
            let r = layout.index()[s * layout.len() + p];
            match layout.token(r) {
                Token::Audio { t } => {
                    if r != visual + t {
                        return Err("audio token row mismatch".into());
                    }
                    let end = p == 0 || p == layout.len() - 1;
                    if layout.kind() == LayoutKind::PerFrame && (!end || layout.frame_of(s) != Some(t)) {
                        return Err("per-frame audio slot misplaced".into());
                    }
                }
                Token::Visual { scale, t, .. } => {
                    if scale >= case.extents.len() || t >= case.frames {
                        return Err("visual token out of range".into());
                    }
                    if let Some(f) = layout.frame_of(s) {
                        if f != t {
                            return Err("per-frame sequence crosses frames".into());
                        }
                    }
                }
            }
        }
    }
    if layout.kind() == LayoutKind::Spatiotemporal && layout.attach() == AudioAttach::None {
        let dirs = direction_set(case.directions).unwrap();
        if layout.index().to_vec() != brute_force_spatiotemporal(&case.extents, case.frames, &dirs) {
            return Err("differs from brute-force placement".into());
        }
    }
    if layout.kind() == LayoutKind::PerFrame && layout.directions() != PLANAR {
        return Err("per-frame layout must use the planar set".into());
    }
    Ok(())
}

/// Runs `count` random layout cases and returns the failure messages.
pub fn layout_sweep(count: usize, seed: u64) -> Vec<String> {
    let mut rng = Rng::new(seed);
    (0..count)
        .filter_map(|i| {
            let case = LayoutCase::random(&mut rng);
            check_layout(&case, &mut rng)
                .err()
                .map(|e| format!("case {i} {case:?}: {e}"))
        })
        .collect()
}

pub fn randomize(store: &mut ParamStore<f64>, rng: &mut Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::normal(shape, std, rng);
    }
}

/// Cross-frame sensitivities of the fusion blocks on random weights:
/// perturbs the visual input of one frame and reports which other frames'
/// outputs moved.
pub struct CrossFrame {
    /// Largest change of frame-level V2A audio outputs at frames other than
    /// the perturbed one, over all probes.
    pub frame_level_max: f64,
    /// Fraction of probes where temporal-level V2A changed another frame.
    pub temporal_rate: f64,
    /// Fraction of probes where A2V changed another frame.
    pub a2v_rate: f64,
}

pub fn cross_frame_probes(probes: usize, seed: u64) -> CrossFrame {
    const FRAMES: usize = 3;
    const DIM: usize = 4;
    const EPS: f64 = 1e-3;
    let mut frame_level_max: f64 = 0.0;
    let (mut temporal_hits, mut a2v_hits) = (0, 0);
    for p in 0..probes {
        let mut rng = Rng::derive(seed, p as u64);
        let mut store = ParamStore::<f64>::new();
        let dims = BlockDims::new(DIM, 3);
        let (frame, temporal, a2v) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            (
                V2aBlock::new(&mut pb, "frame", dims, V2aLevel::Frame),
                V2aBlock::new(&mut pb, "temporal", dims, V2aLevel::Temporal),
                A2vBlock::new(&mut pb, "a2v", dims),
            )
        };
        randomize(&mut store, &mut rng, 0.5);
        let visual: Tensor<f64> = Tensor::normal([FRAMES, 3, 3, DIM], 1.0, &mut rng);
        let audio: Tensor<f64> = Tensor::normal([FRAMES, DIM], 1.0, &mut rng);
        let src = rng.below(0, FRAMES);
        let mut moved = visual.clone();
        let at = ((src * 3 + rng.below(0, 3)) * 3 + rng.below(0, 3)) * DIM + rng.below(0, DIM);
        moved.data_mut()[at] += EPS;

        let run = |v: &Tensor<f64>| {
            let mut g = Graph::new(&store);
            let (vv, av) = (g.constant(v.clone()), g.constant(audio.clone()));
            let f = frame.forward(&mut g, vv, av).unwrap();
            let t = temporal.forward(&mut g, vv, av).unwrap();
            let a = a2v.forward(&mut g, vv, av).unwrap();
            (g.value(f).clone(), g.value(t).clone(), g.value(a).clone())
        };
        let (f0, t0, a0) = run(&visual);
        let (f1, t1, a1) = run(&moved);
        let other = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let per = x.numel() / FRAMES;
            (0..FRAMES)
                .filter(|&t| t != src)
                .flat_map(|t| (t * per..(t + 1) * per).map(move |i| (i, t)))
                .map(|(i, _)| (x.data()[i] - y.data()[i]).abs())
                .fold(0.0f64, f64::max)
        };
        frame_level_max = frame_level_max.max(other(&f0, &f1));
        if other(&t0, &t1) > 0.0 {
            temporal_hits += 1;
        }
        if other(&a0, &a1) > 0.0 {
            a2v_hits += 1;
        }
    }
    CrossFrame {
        frame_level_max,
        temporal_rate: temporal_hits as f64 / probes as f64,
        a2v_rate: a2v_hits as f64 / probes as f64,
    }
}

type OpFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

/// One case per differentiable graph op, inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let mut n = |shape: &[usize]| -> Tensor<f64> { Tensor::normal(shape.to_vec(), 1.0, &mut rng) };
    let (a, b) = (n(&[3, 5]), n(&[3, 5]));
    let x3 = n(&[2, 3, 4]);
    let index: Rc<[usize]> = vec![4, 0, 0, 2, 4, 1, 3].into();
    let i2 = index.clone();
    let target = Tensor::from_fn([3, 2, 2, 1], |i| [0.0, 1.0, 0.25, 1.0, 0.0, 0.0][i % 6]);
    let t2 = target.clone();
    let weights = [1.0, 0.0, 1.0];
    let case = |name, inputs, f: OpFn| OpCase { name, inputs, f };
    let mut cases = vec![
        case("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], -1.5))),
        case("silu", vec![a.clone()], Box::new(|g, v| g.silu(v[0]))),
        case("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        case("softplus", vec![a.clone()], Box::new(|g, v| g.softplus(v[0]))),
        case("sum", vec![a.clone()], Box::new(|g, v| g.sum(v[0]))),
        case("mean", vec![a], Box::new(|g, v| g.mean(v[0]))),
        case(
            "linear",
            vec![n(&[7, 5]), n(&[5, 6]), n(&[6])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
        ),
        case(
            "layer_norm",
            vec![n(&[2, 3, 5]), n(&[5]), n(&[5])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        case(
            "permute",
            vec![x3.clone()],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
        ),
        case(
            "reverse_axis",
            vec![x3.clone()],
            Box::new(|g, v| g.reverse_axis(v[0], 1).unwrap()),
        ),
        case(
            "reshape",
            vec![x3.clone()],
            Box::new(|g, v| g.reshape(v[0], &[6, 4]).unwrap()),
        ),
        case(
            "slice_rows",
            vec![x3.clone()],
            Box::new(|g, v| g.slice_rows(v[0], 2, 5).unwrap()),
        ),
        case(
            "concat_last",
            vec![x3.clone(), n(&[2, 3, 2])],
            Box::new(|g, v| g.concat_last(v[0], v[1]).unwrap()),
        ),
        case(
            "concat_rows",
            vec![x3, n(&[5, 4])],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        case(
            "gather_rows",
            vec![n(&[5, 3])],
            Box::new(move |g, v| g.gather_rows(v[0], i2.clone()).unwrap()),
        ),
        case(
            "scatter_rows",
            vec![n(&[7, 3])],
            Box::new(move |g, v| g.scatter_rows(v[0], index.clone(), 5).unwrap()),
        ),
        case(
            "causal_conv1d",
            vec![n(&[6, 3]), n(&[3, 3]), n(&[3])],
            Box::new(|g, v| g.causal_conv1d(v[0], v[1], v[2]).unwrap()),
        ),
        case(
            "depthwise_conv2d",
            vec![n(&[2, 4, 5, 3]), n(&[3, 3, 3]), n(&[3])],
            Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], v[2]).unwrap()),
        ),
        case(
            "depthwise_conv3d",
            vec![n(&[3, 4, 3, 2]), n(&[3, 3, 3, 2]), n(&[2])],
            Box::new(|g, v| g.depthwise_conv3d(v[0], v[1], v[2]).unwrap()),
        ),
        case(
            "upsample_bilinear",
            vec![n(&[2, 3, 5, 2])],
            Box::new(|g, v| g.upsample_bilinear(v[0], 7, 8).unwrap()),
        ),
        case(
            "frame_dot",
            vec![n(&[3, 2, 4, 5]), n(&[3, 5])],
            Box::new(|g, v| g.frame_dot(v[0], v[1]).unwrap()),
        ),
    ];
    let logits = n(&[3, 2, 2, 1]);
    cases.push(case(
        "dice_loss",
        vec![logits.clone()],
        Box::new(move |g, v| g.dice_loss(v[0], &target, &weights).unwrap()),
    ));
    cases.push(case(
        "bce_with_logits",
        vec![logits],
        Box::new(move |g, v| g.bce_with_logits(v[0], &t2, &weights).unwrap()),
    ));
    let (s, l, d, k) = (2, 6, 3, 4);
    let scan_inputs = vec![
        n(&[s, l, d]),
        Tensor::uniform([s, l, d], 0.05, 0.8, &mut rng),
        Tensor::uniform([d, k], -0.5, 0.7, &mut rng),
        Tensor::normal([s, l, k], 1.0, &mut rng),
        Tensor::normal([s, l, k], 1.0, &mut rng),
        Tensor::normal([d], 1.0, &mut rng),
    ];
    for (name, imp) in [
        ("selective_scan", ScanImpl::Sequential),
        ("selective_scan_parallel", ScanImpl::Parallel),
    ] {
        cases.push(case(
            name,
            scan_inputs.clone(),
            Box::new(move |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], imp).unwrap()),
        ));
    }
    cases
}

/// Central-difference check of `Σ f(inputs) ⊙ w` for a random probe `w`.
pub fn op_gradcheck(case: &OpCase, coords: usize, seed: u64) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()))
        .collect();
    let shape = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = (case.f)(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let probe: Tensor<f64> = Tensor::normal(shape, 1.0, &mut rng);
    let picked = sample_coords(&store, coords, &mut rng, |_| true);
    check(&mut store, &picked, GradCheckOptions::default(), |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = (case.f)(g, &vars);
        let w = g.constant(probe.clone());
        let p = g.mul(y, w);
        Ok(g.sum(p))
    })
    .unwrap()
}
