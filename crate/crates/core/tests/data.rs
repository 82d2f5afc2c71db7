use ssmavs::data::{self, Geometry, AUDIO_DIM, CANVAS, CLASSES, MAX_ZOOM};
use ssmavs::model::Task;
use ssmavs::rng::Rng;

#[test]
fn audio_matches_masks_in_every_frame() {
    for task in [Task::S4, Task::Ms3, Task::Semantic] {
        for s in data::generate(11, task, 100, 5).unwrap() {
            for t in 0..5 {
                assert_eq!(
                    data::decode_audio(&s.audio, t),
                    data::mask_classes(&s.masks, t),
                    "{task:?} frame {t}"
                );
                assert_eq!(s.scene.sounding_classes(t), data::mask_classes(&s.masks, t));
            }
        }
    }
}

#[test]
fn silent_frame_frequency_is_moderate() {
    let samples = data::generate(12, Task::Ms3, 1000, 5).unwrap();
    let silent = samples
        .iter()
        .flat_map(|s| (0..5).map(move |t| data::mask_classes(&s.masks, t).is_empty()))
        .filter(|&e| e)
        .count();
    let rate = silent as f64 / 5000.0;
    assert!((0.05..=0.20).contains(&rate), "silent rate {rate}");
}

#[test]
fn binary_and_semantic_tasks_share_class_ids() {
    assert_eq!(data::num_classes(Task::S4), 1);
    assert_eq!(data::num_classes(Task::Ms3), 1);
    assert_eq!(data::num_classes(Task::Semantic), CLASSES);
    for s in data::generate(13, Task::Semantic, 50, 3).unwrap() {
        assert!(s
            .masks
            .data()
            .iter()
            .all(|&v| v >= 0.0 && v <= CLASSES as f32 && v.fract() == 0.0));
        assert_eq!(s.audio.shape(), [3, AUDIO_DIM]);
        assert_eq!(s.video.shape(), [3, CANVAS, CANVAS, 3]);
        assert!(s.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn horizontal_flip_mirrors_columns() {
    let s = data::sample(14, Task::Ms3, 3, 4).unwrap();
    let out = Geometry {
        flip: true,
        ..Geometry::IDENTITY
    }
    .apply(&s);
    let n = CANVAS;
    for t in 0..4 {
        for y in 0..n {
            for x in 0..n {
                let (o, m) = ((t * n + y) * n + x, (t * n + y) * n + n - 1 - x);
                assert_eq!(out.masks.data()[o], s.masks.data()[m]);
                assert_eq!(out.video.data()[o * 3..o * 3 + 3], s.video.data()[m * 3..m * 3 + 3]);
            }
        }
    }
}

#[test]
fn augmentation_keeps_video_and_masks_aligned() {
    let mut rng = Rng::new(15);
    for i in 0..40 {
        let s = data::sample(15, Task::Semantic, i, 3).unwrap();
        let g = Geometry::random(&mut rng);
        assert!(g.window_inside());
        assert!((1.0..=MAX_ZOOM).contains(&g.scale));
        let out = g.apply(&s);
        let n = CANVAS;
        for t in 0..3 {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = g.source(y, x);
                    let (o, src) = ((t * n + y) * n + x, (t * n + sy) * n + sx);
                    assert_eq!(out.masks.data()[o], s.masks.data()[src]);
                    assert_eq!(out.video.data()[o * 3..o * 3 + 3], s.video.data()[src * 3..src * 3 + 3]);
                }
            }
        }
        assert_eq!(out.audio.data(), s.audio.data());
    }
}

#[test]
fn zoom_grows_shapes() {
    let mut grown = 0;
    for i in 0..20 {
        let s = data::sample(16, Task::S4, i, 1).unwrap();
        let g = Geometry {
            flip: false,
            scale: MAX_ZOOM,
            offset: (0, 0),
        };
        let out = g.apply(&s);
        let area = |m: &ssmavs::Tensor<f32>| m.data().iter().filter(|&&v| v > 0.0).count();
        let (before, after) = (area(&s.masks), area(&out.masks));
        if after > before {
            grown += 1;
        }
    }
    assert!(grown >= 10, "{grown} of 20 shapes grew");
}

#[test]
fn augment_is_deterministic() {
    let s = data::sample(17, Task::Ms3, 0, 3).unwrap();
    let (a, b) = (data::augment(&s, 9), data::augment(&s, 9));
    assert!(a.video.bit_eq(&b.video) && a.masks.bit_eq(&b.masks));
}

#[test]
fn zero_frames_are_rejected() {
    assert!(data::sample(0, Task::S4, 0, 0).is_err());
}
