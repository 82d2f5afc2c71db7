//! Synthetic audio-visual clips.
//!
//! A clip shows textured shapes moving on linear trajectories over a noisy
//! background. Each shape has a class in `1..=CLASSES`; the class fixes its
//! colour. The per-frame audio descriptor is the sum of the class indicators
//! of the shapes sounding in that frame, each indicator filling an
//! `SLOT`-wide block of the `AUDIO_DIM` vector, plus Gaussian noise.
//! Masks hold the class ids of sounding shapes only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CANVAS: usize = 64;
pub const CLASSES: usize = 8;
pub const AUDIO_DIM: usize = 64;
pub const SLOT: usize = AUDIO_DIM / CLASSES;
pub const AUDIO_NOISE: f64 = 0.1;
/// Probability that an ms3 or semantic frame is silent.
pub const SILENT_PROB: f64 = 0.12;
/// Probability that the sounding set changes between consecutive frames.
pub const SWITCH_PROB: f64 = 0.3;
pub const MAX_SHAPES: usize = 3;
/// Largest resize factor of the resize-crop augmentation.
pub const MAX_ZOOM: f64 = 1.15;

const PALETTE: [[f64; 3]; CLASSES] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rect,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub class: usize,
    pub kind: ShapeKind,
    /// Half extent in pixels.
    pub size: f64,
    /// Centre `(y, x)` in the first and last frame.
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub texture_seed: u64,
}

impl SceneShape {
    pub fn center(&self, t: usize, frames: usize) -> (f64, f64) {
        let a = if frames > 1 {
            t as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        (
            self.start.0 + a * (self.end.0 - self.start.0),
            self.start.1 + a * (self.end.1 - self.start.1),
        )
    }

    /// Whether the pixel centred at `(py, px)` is covered in frame `t`.
    pub fn covers(&self, py: f64, px: f64, t: usize, frames: usize) -> bool {
        let (cy, cx) = self.center(t, frames);
        let (dy, dx) = (py - cy, px - cx);
        let r = self.size;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= r && dx.abs() <= r * 0.75,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
        }
    }

    fn texture(&self, py: f64, px: f64) -> f64 {
        let phase = (self.texture_seed % 628) as f64 / 100.0;
        let freq = 0.4 + (self.texture_seed >> 16) as f64 % 5.0 * 0.15;
        let stripes = if self.texture_seed & 1 == 0 { py + px } else { py - px };
        0.15 * (freq * stripes + phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<SceneShape>,
    pub frames: usize,
    /// Indices into `shapes` sounding in each frame.
    pub schedule: Vec<Vec<usize>>,
}

impl Scene {
    pub fn sounding_classes(&self, t: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.schedule[t].iter().map(|&i| self.shapes[i].class).collect();
        c.sort_unstable();
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub task: Task,
    pub scene: Scene,
    /// `[T, CANVAS, CANVAS, 3]` in `[0, 1]`.
    pub video: Tensor<f32>,
    /// `[T, AUDIO_DIM]`.
    pub audio: Tensor<f32>,
    /// `[T, CANVAS, CANVAS]` class ids, 0 = background.
    pub masks: Tensor<f32>,
}

impl ClipSample {
    pub fn frames(&self) -> usize {
        self.scene.frames
    }
}

/// Number of output classes a model needs for `task`.
pub fn num_classes(task: Task) -> usize {
    match task {
        Task::S4 | Task::Ms3 => 1,
        Task::Semantic => CLASSES,
    }
}

/// Sample `index` of the stream `(seed, task)`.
pub fn sample(seed: u64, task: Task, index: u64, frames: usize) -> Result<ClipSample> {
    if frames == 0 {
        return Err(Error::Invalid("clips need at least one frame".into()));
    }
    let mut rng = Rng::derive(seed, index);
    let scene = scene(&mut rng, task, frames);
    let (video, masks) = render(&scene, &mut rng);
    let audio = audio(&scene, &mut rng);
    Ok(ClipSample {
        task,
        scene,
        video,
        audio,
        masks,
    })
}

/// `count` consecutive samples starting at index 0.
pub fn generate(seed: u64, task: Task, count: usize, frames: usize) -> Result<Vec<ClipSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample(seed, task, i, frames))
        .collect()
}

fn scene(rng: &mut Rng, task: Task, frames: usize) -> Scene {
    let mut classes: Vec<usize> = (1..=CLASSES).collect();
    rng.shuffle(&mut classes);
    let kinds = [ShapeKind::Rect, ShapeKind::Circle, ShapeKind::Triangle];
    let random_shape = |rng: &mut Rng, class: usize, lo: (f64, f64), hi: (f64, f64), size: f64| {
        let mut point = || {
            (
                rng.uniform_range(lo.0 + size, hi.0 - size),
                rng.uniform_range(lo.1 + size, hi.1 - size),
            )
        };
        let (start, end) = (point(), point());
        SceneShape {
            class,
            kind: kinds[rng.below(0, kinds.len())],
            size,
            start,
            end,
            texture_seed: rng.next_u64(),
        }
    };
    let c = CANVAS as f64;
    match task {
        Task::S4 => {
            let size = rng.uniform_range(7.0, 13.0);
            let shape = random_shape(rng, classes[0], (0.0, 0.0), (c, c), size);
            Scene {
                shapes: vec![shape],
                frames,
                schedule: vec![vec![0]; frames],
            }
        }
        Task::Ms3 | Task::Semantic => {
            let count = rng.below(1, MAX_SHAPES + 1);
            let mut cells = [0usize, 1, 2, 3];
            rng.shuffle(&mut cells);
            let half = c / 2.0;
            let shapes: Vec<SceneShape> = (0..count)
                .map(|i| {
                    let (cy, cx) = ((cells[i] / 2) as f64 * half, (cells[i] % 2) as f64 * half);
                    let size = rng.uniform_range(6.0, 10.0);
                    random_shape(rng, classes[i], (cy, cx), (cy + half, cx + half), size)
                })
                .collect();
            let subset = |rng: &mut Rng| loop {
                let s: Vec<usize> = (0..count).filter(|_| rng.bernoulli(0.5)).collect();
                if !s.is_empty() {
                    break s;
                }
            };
            let mut current = subset(rng);
            let mut schedule = Vec::with_capacity(frames);
            for t in 0..frames {
                if t > 0 && rng.bernoulli(SWITCH_PROB) {
                    current = subset(rng);
                }
                schedule.push(if rng.bernoulli(SILENT_PROB) {
                    Vec::new()
                } else {
                    current.clone()
                });
            }
            Scene {
                shapes,
                frames,
                schedule,
            }
        }
    }
}

fn render(scene: &Scene, rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    let (t_n, n) = (scene.frames, CANVAS);
    let tint = [
        rng.uniform_range(0.1, 0.3),
        rng.uniform_range(0.1, 0.3),
        rng.uniform_range(0.1, 0.3),
    ];
    let mut video = vec![0f32; t_n * n * n * 3];
    let mut masks = vec![0f32; t_n * n * n];
    for t in 0..t_n {
        for y in 0..n {
            for x in 0..n {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let base = (t * n + y) * n + x;
                let grad = 0.1 * (py + px) / (2.0 * n as f64);
                let mut rgb = [0.0; 3];
                for (ch, v) in rgb.iter_mut().enumerate() {
                    *v = tint[ch] + grad + 0.05 * rng.normal();
                }
                for (i, shape) in scene.shapes.iter().enumerate() {
                    if shape.covers(py, px, t, t_n) {
                        let tex = shape.texture(py, px);
                        for (ch, v) in rgb.iter_mut().enumerate() {
                            *v = PALETTE[shape.class - 1][ch] + tex;
                        }
                        if scene.schedule[t].contains(&i) {
                            masks[base] = shape.class as f32;
                        }
                    }
                }
                for ch in 0..3 {
                    video[base * 3 + ch] = rgb[ch].clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    (
        Tensor::new([t_n, n, n, 3], video).expect("video shape"),
        Tensor::new([t_n, n, n], masks).expect("mask shape"),
    )
}

fn audio(scene: &Scene, rng: &mut Rng) -> Tensor<f32> {
    let mut data = vec![0f32; scene.frames * AUDIO_DIM];
    for t in 0..scene.frames {
        let row = &mut data[t * AUDIO_DIM..(t + 1) * AUDIO_DIM];
        for class in scene.sounding_classes(t) {
            for v in &mut row[(class - 1) * SLOT..class * SLOT] {
                *v += 1.0;
            }
        }
        for v in row.iter_mut() {
            *v += (AUDIO_NOISE * rng.normal()) as f32;
        }
    }
    Tensor::new([scene.frames, AUDIO_DIM], data).expect("audio shape")
}

/// Classes whose audio slot mean exceeds 0.5 in frame `t`.
pub fn decode_audio(audio: &Tensor<f32>, t: usize) -> Vec<usize> {
    let row = &audio.data()[t * AUDIO_DIM..(t + 1) * AUDIO_DIM];
    (1..=CLASSES)
        .filter(|&c| row[(c - 1) * SLOT..c * SLOT].iter().map(|&v| v as f64).sum::<f64>() / SLOT as f64 > 0.5)
        .collect()
}

/// Distinct nonzero class ids of mask frame `t`.
pub fn mask_classes(masks: &Tensor<f32>, t: usize) -> Vec<usize> {
    let per = CANVAS * CANVAS;
    let mut seen = [false; CLASSES + 1];
    for &v in &masks.data()[t * per..(t + 1) * per] {
        seen[v as usize] = true;
    }
    (1..=CLASSES).filter(|&c| seen[c]).collect()
}

/// Joint geometric transform: optional horizontal flip, then a zoom by
/// `scale` followed by a `CANVAS × CANVAS` crop at `offset` of the zoomed
/// canvas. Sampling is nearest-neighbour so masks stay exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub flip: bool,
    pub scale: f64,
    pub offset: (usize, usize),
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        flip: false,
        scale: 1.0,
        offset: (0, 0),
    };

    pub fn random(rng: &mut Rng) -> Self {
        let flip = rng.bernoulli(0.5);
        let scale = rng.uniform_range(1.0, MAX_ZOOM);
        let spare = zoomed_size(scale) - CANVAS;
        Geometry {
            flip,
            scale,
            offset: (rng.below(0, spare + 1), rng.below(0, spare + 1)),
        }
    }

    /// Source pixel of output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let map = |o: usize, off: usize| {
            let z = zoomed_size(self.scale);
            (((o + off) as f64 + 0.5) * CANVAS as f64 / z as f64)
                .floor()
                .min((CANVAS - 1) as f64) as usize
        };
        let (sy, sx) = (map(y, self.offset.0), map(x, self.offset.1));
        (sy, if self.flip { CANVAS - 1 - sx } else { sx })
    }

    /// Whether the crop window lies inside the zoomed canvas.
    pub fn window_inside(&self) -> bool {
        let z = zoomed_size(self.scale);
        self.offset.0 + CANVAS <= z && self.offset.1 + CANVAS <= z
    }

    pub fn apply(&self, sample: &ClipSample) -> ClipSample {
        let (t_n, n) = (sample.frames(), CANVAS);
        let map: Vec<usize> = (0..n * n)
            .map(|p| {
                let (sy, sx) = self.source(p / n, p % n);
                sy * n + sx
            })
            .collect();
        let mut video = vec![0f32; sample.video.numel()];
        let mut masks = vec![0f32; sample.masks.numel()];
        for t in 0..t_n {
            for (p, &s) in map.iter().enumerate() {
                masks[t * n * n + p] = sample.masks.data()[t * n * n + s];
                for ch in 0..3 {
                    video[(t * n * n + p) * 3 + ch] = sample.video.data()[(t * n * n + s) * 3 + ch];
                }
            }
        }
        ClipSample {
            video: Tensor::new(sample.video.shape().to_vec(), video).expect("video shape"),
            masks: Tensor::new(sample.masks.shape().to_vec(), masks).expect("mask shape"),
            ..sample.clone()
        }
    }
}

fn zoomed_size(scale: f64) -> usize {
    (CANVAS as f64 * scale).round() as usize
}

/// Random flip and resize-crop applied jointly to video and masks.
pub fn augment(sample: &ClipSample, seed: u64) -> ClipSample {
    Geometry::random(&mut Rng::new(seed)).apply(sample)
}
