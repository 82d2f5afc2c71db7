mod common;

use ssmavs::autodiff::{Graph, ParamBuilder, ParamStore};
use ssmavs::blocks::{A2vBlock, BlockDims, ContextFusionBlock, TemporalBlock, V2aBlock, V2aLevel, VssBlock};
use ssmavs::layout::{direction_set, Direction};
use ssmavs::rng::Rng;
use ssmavs::ssm::{Gate, ScanImpl};
use ssmavs::Tensor;

const DIM: usize = 4;

fn zero_gate(store: &mut ParamStore<f64>, gate: &Gate) {
    let w = store.value(gate.out.w).shape().to_vec();
    store.set_value(gate.out.w, Tensor::zeros(w)).unwrap();
    if let Some(b) = gate.out.b {
        store.set_value(b, Tensor::zeros([DIM])).unwrap();
    }
}

#[test]
fn frame_level_fusion_never_crosses_frames() {
    let r = common::cross_frame_probes(common::SENSITIVITY_PROBES, 3);
    assert_eq!(r.frame_level_max, 0.0);
}

#[test]
fn temporal_fusion_reaches_other_frames() {
    let r = common::cross_frame_probes(common::SENSITIVITY_PROBES, 4);
    assert!(
        r.temporal_rate >= common::SENSITIVITY_RATE,
        "temporal V2A rate {}",
        r.temporal_rate
    );
    assert!(r.a2v_rate >= common::SENSITIVITY_RATE, "A2V rate {}", r.a2v_rate);
}

#[test]
fn frame_level_audio_sees_every_position_of_its_frame() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(6);
    let block = V2aBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        "v2a",
        BlockDims::new(DIM, 3),
        V2aLevel::Frame,
    );
    common::randomize(&mut store, &mut rng, 0.5);
    let (t, h, w) = (2, 3, 4);
    let visual: Tensor<f64> = Tensor::normal([t, h, w, DIM], 1.0, &mut rng);
    let audio: Tensor<f64> = Tensor::normal([t, DIM], 1.0, &mut rng);
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::new(&store);
        let (vv, av) = (g.constant(v.clone()), g.constant(audio.clone()));
        let out = block.forward(&mut g, vv, av).unwrap();
        g.value(out).clone()
    };
    let base = run(&visual);
    for f in 0..t {
        for pos in 0..h * w {
            let mut v = visual.clone();
            v.data_mut()[(f * h * w + pos) * DIM] += 1e-3;
            let out = run(&v);
            let row = |x: &Tensor<f64>| x.data()[f * DIM..(f + 1) * DIM].to_vec();
            assert_ne!(row(&out), row(&base), "frame {f} position {pos}");
        }
    }
}

#[test]
fn zeroed_gates_make_blocks_identities() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(7);
    let dims = BlockDims::new(DIM, 3);
    let dirs = direction_set(8).unwrap();
    let (vss, temporal, frame, tv2a, a2v, cfb) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        (
            VssBlock::new(&mut pb, "vss", dims),
            TemporalBlock::new(&mut pb, "temporal", dims, &dirs),
            V2aBlock::new(&mut pb, "frame", dims, V2aLevel::Frame),
            V2aBlock::new(&mut pb, "tv2a", dims, V2aLevel::Temporal),
            A2vBlock::new(&mut pb, "a2v", dims),
            ContextFusionBlock::new(&mut pb, "cfb", dims, &direction_set(4).unwrap()),
        )
    };
    common::randomize(&mut store, &mut rng, 0.5);
    for gate in [
        &vss.gate,
        &temporal.gate,
        &frame.gate,
        &tv2a.gate,
        &a2v.gate,
        &cfb.temporal.gate,
        &cfb.a2v.gate,
    ] {
        zero_gate(&mut store, gate);
    }
    let fine: Tensor<f64> = Tensor::normal([2, 4, 4, DIM], 1.0, &mut rng);
    let coarse: Tensor<f64> = Tensor::normal([2, 2, 2, DIM], 1.0, &mut rng);
    let audio: Tensor<f64> = Tensor::normal([2, DIM], 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let (f, c, a) = (
        g.constant(fine.clone()),
        g.constant(coarse.clone()),
        g.constant(audio.clone()),
    );
    for out in [
        vss.forward(&mut g, &[f, c]).unwrap(),
        temporal.forward(&mut g, &[f, c]).unwrap(),
    ] {
        assert!(g.value(out[0]).bit_eq(&fine));
        assert!(g.value(out[1]).bit_eq(&coarse));
    }
    for b in [&frame, &tv2a] {
        let out = b.forward(&mut g, f, a).unwrap();
        assert!(g.value(out).bit_eq(&audio));
    }
    let out = a2v.forward(&mut g, f, a).unwrap();
    assert!(g.value(out).bit_eq(&fine));
    let out = cfb.forward(&mut g, f, a).unwrap();
    assert!(g.value(out).bit_eq(&fine));
}

#[test]
fn single_frame_eight_directions_equal_four_unique_twice() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(8);
    let block = TemporalBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        "t",
        BlockDims::new(DIM, 3),
        &direction_set(8).unwrap(),
    );
    common::randomize(&mut store, &mut rng, 0.5);
    let doubled: Vec<Direction> = ["THW+", "TWH+", "THW+", "TWH+", "THW-", "TWH-", "THW-", "TWH-"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let twin = block.with_directions(&doubled);
    let x: Tensor<f64> = Tensor::normal([1, 4, 3, DIM], 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let v = g.constant(x);
    let a = block.forward(&mut g, &[v]).unwrap()[0];
    let b = twin.forward(&mut g, &[v]).unwrap()[0];
    assert!(g.value(a).bit_eq(g.value(b)));
}

#[test]
fn parallel_scan_blocks_match_sequential() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(9);
    let seq = BlockDims::new(DIM, 3);
    let par = BlockDims {
        scan: ScanImpl::Parallel,
        ..seq
    };
    let dirs = direction_set(6).unwrap();
    let (a, b) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        (
            TemporalBlock::new(&mut pb, "a", seq, &dirs),
            TemporalBlock::new(&mut pb, "b", par, &dirs),
        )
    };
    common::randomize(&mut store, &mut rng, 0.5);
    let ids: Vec<_> = store.ids().collect();
    let half = ids.len() / 2;
    for i in 0..half {
        let v = store.value(ids[i]).clone();
        store.set_value(ids[half + i], v).unwrap();
    }
    let x: Tensor<f64> = Tensor::normal([3, 8, 8, DIM], 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let v = g.constant(x);
    let ya = a.forward(&mut g, &[v]).unwrap()[0];
    let yb = b.forward(&mut g, &[v]).unwrap()[0];
    assert!(ssmavs::tensor::max_rel_dev(g.value(yb).data(), g.value(ya).data(), 1e-300) < 1e-12);
}

#[test]
fn blocks_reject_mismatched_audio() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(10);
    let block = V2aBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        "v",
        BlockDims::new(DIM, 2),
        V2aLevel::Frame,
    );
    let mut g = Graph::new(&store);
    let v = g.constant(Tensor::zeros([2, 2, 2, DIM]));
    let a = g.constant(Tensor::zeros([3, DIM]));
    assert!(block.forward(&mut g, v, a).is_err());
}
