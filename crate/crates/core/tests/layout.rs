mod common;

use proptest::prelude::*;
use ssmavs::layout::{
    attach_audio, direction_set, flatten_3d, flatten_ss2d, merge_directions, partition_audio, pyramid_rows, split_rows,
    AudioAttach, Direction, Extent, FusionLevel, ScanLayout, Token,
};
use ssmavs::rng::Rng;
use ssmavs::Tensor;

#[test]
fn random_layouts_round_trip() {
    let failures = common::layout_sweep(2000, 5);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn brute_force_matches_on_a_full_pyramid() {
    let extents = [Extent::new(4, 3), Extent::new(2, 2), Extent::new(1, 1)];
    for count in ssmavs::layout::DIRECTION_COUNTS {
        let dirs = direction_set(count).unwrap();
        let layout = ScanLayout::spatiotemporal(&extents, 3, &dirs, AudioAttach::None).unwrap();
        assert_eq!(
            layout.index().to_vec(),
            common::brute_force_spatiotemporal(&extents, 3, &dirs)
        );
    }
}

#[test]
fn direction_sets_are_nested_and_distinct() {
    let mut prev: Vec<Direction> = Vec::new();
    for count in ssmavs::layout::DIRECTION_COUNTS {
        let set = direction_set(count).unwrap();
        assert_eq!(set.len(), count);
        let fwd: Vec<_> = set.iter().filter(|d| !d.reversed).copied().collect();
        assert!(prev.iter().filter(|d| !d.reversed).all(|d| fwd.contains(d)));
        for (i, a) in set.iter().enumerate() {
            assert!(set[i + 1..].iter().all(|b| b != a));
        }
        prev = set;
    }
    assert!(direction_set(3).is_err());
}

#[test]
fn temporal_and_spatial_first_coincide_for_one_frame() {
    let mut rng = Rng::new(8);
    let x: Tensor<f64> = Tensor::normal([1, 3, 4, 2], 1.0, &mut rng);
    let (layout, seqs) = flatten_3d(&[x], 12).unwrap();
    let seq = |name: &str| {
        let d: Direction = name.parse().unwrap();
        let s = layout.directions().iter().position(|&x| x == d).unwrap();
        let n = layout.len() * 2;
        seqs.data()[s * n..(s + 1) * n].to_vec()
    };
    assert_eq!(seq("THW+"), seq("HWT+"));
    assert_eq!(seq("TWH+"), seq("WHT+"));
    assert_eq!(seq("THW-"), seq("HWT-"));
    assert_eq!(seq("HTW+"), seq("THW+"));
    assert_eq!(seq("WTH+"), seq("TWH+"));
}

#[test]
fn audio_slots_follow_attach_mode() {
    let e = [Extent::new(2, 2)];
    let frames = 3;
    let visual = frames * 4;
    let per = ScanLayout::per_frame(&e, frames, AudioAttach::Append).unwrap();
    for s in 0..per.seqs() {
        let last = per.index()[s * per.len() + per.len() - 1];
        assert_eq!(
            per.token(last),
            Token::Audio {
                t: per.frame_of(s).unwrap()
            }
        );
    }
    let st = ScanLayout::spatiotemporal(&e, frames, &direction_set(4).unwrap(), AudioAttach::Append).unwrap();
    for s in 0..st.seqs() {
        let seq = &st.index()[s * st.len()..(s + 1) * st.len()];
        let audio: Vec<usize> = seq.iter().filter(|&&r| r >= visual).map(|r| r - visual).collect();
        if st.direction_of(s).reversed {
            assert_eq!(audio, [2, 1, 0]);
            assert!(seq[..3].iter().all(|&r| r >= visual));
        } else {
            assert_eq!(audio, [0, 1, 2]);
            assert!(seq[seq.len() - 3..].iter().all(|&r| r >= visual));
        }
    }
    let pre = ScanLayout::spatiotemporal(&e, frames, &direction_set(4).unwrap(), AudioAttach::Prepend).unwrap();
    for s in 0..pre.seqs() {
        let head: Vec<usize> = pre.index()[s * pre.len()..s * pre.len() + 3]
            .iter()
            .map(|r| r - visual)
            .collect();
        let want = if pre.direction_of(s).reversed {
            [2, 1, 0]
        } else {
            [0, 1, 2]
        };
        assert_eq!(head, want);
    }
}

#[test]
fn partition_recovers_direction_sums() {
    let mut rng = Rng::new(9);
    let v: Tensor<f64> = Tensor::normal([2, 3, 2, 3], 1.0, &mut rng);
    let a: Tensor<f64> = Tensor::normal([2, 3], 1.0, &mut rng);
    for level in [FusionLevel::Frame, FusionLevel::Temporal] {
        for attach in [AudioAttach::Append, AudioAttach::Prepend] {
            let (layout, seqs) = attach_audio(&v, &a, attach, level).unwrap();
            let (audio, visual) = partition_audio(&layout, &seqs).unwrap();
            let k = 4.0;
            for (x, y) in audio.data().iter().zip(a.data()) {
                assert!((x - k * y).abs() < 1e-12);
            }
            for (x, y) in visual.data().iter().zip(v.data()) {
                assert!((x - k * y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rejects_degenerate_requests() {
    assert!(ScanLayout::per_frame(&[], 1, AudioAttach::None).is_err());
    assert!(ScanLayout::per_frame(&[Extent::new(0, 2)], 1, AudioAttach::None).is_err());
    assert!(ScanLayout::per_frame(&[Extent::new(2, 2)], 0, AudioAttach::None).is_err());
    let planar: Vec<Direction> = vec!["HW+".parse().unwrap()];
    assert!(ScanLayout::spatiotemporal(&[Extent::new(2, 2)], 1, &planar, AudioAttach::None).is_err());
    let x = Tensor::<f64>::zeros([2, 2, 2, 1]);
    let bad_audio = Tensor::<f64>::zeros([3, 1]);
    assert!(attach_audio(&x, &bad_audio, AudioAttach::Append, FusionLevel::Frame).is_err());
}

fn extents_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((1usize..5, 1usize..5), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pyramid_rows_split_round_trip(ext in extents_strategy(), frames in 1usize..4, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scales: Vec<Tensor<f64>> = ext.iter().map(|&(h, w)| Tensor::normal([frames, h, w, c], 1.0, &mut rng)).collect();
        let (rows, extents, t) = pyramid_rows(&scales).unwrap();
        let back = split_rows(&rows, &extents, t).unwrap();
        for (a, b) in back.iter().zip(&scales) {
            prop_assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn planar_and_3d_merges_scale_by_direction_count(ext in extents_strategy(), frames in 1usize..4, k in 0usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let scales: Vec<Tensor<f64>> = ext.iter().map(|&(h, w)| Tensor::normal([frames, h, w, 2], 1.0, &mut rng)).collect();
        let count = ssmavs::layout::DIRECTION_COUNTS[k];
        let (l2, s2) = flatten_ss2d(&scales).unwrap();
        let (l3, s3) = flatten_3d(&scales, count).unwrap();
        for (layout, seqs, mult) in [(&l2, &s2, 4.0), (&l3, &s3, count as f64)] {
            let merged = merge_directions(layout, seqs).unwrap();
            for (m, x) in merged.iter().zip(&scales) {
                prop_assert!(m.data().iter().zip(x.data()).all(|(a, b)| (a - mult * b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn random_cases_hold(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let case = common::LayoutCase::random(&mut rng);
        prop_assert_eq!(common::check_layout(&case, &mut rng), Ok(()));
    }
}
