//! Full segmentation network: stems, multi-scale temporal encoder, modality
//! aggregation decoder, contextual integration pyramid and head.

mod metrics;
mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{binary_metrics, frame_iou, semantic_metrics, upsample_logits, Counts, MetricOptions, Metrics};
pub use optim::{AdamW, AdamWConfig};

use crate::autodiff::{Graph, ParamBuilder, ParamStore, Var};
use crate::blocks::{BlockDims, ContextFusionBlock, TemporalBlock, V2aBlock, V2aLevel, VssBlock};
use crate::error::{Error, Result};
use crate::layout::{direction_set, Direction, DEFAULT_DIRECTIONS, DIRECTION_COUNTS};
use crate::nn::{LayerNorm, Linear};
use crate::rng::Rng;
use crate::ssm::ScanImpl;
use crate::tensor::{Element, Tensor};

/// Patch size of the first stage; later stages halve the resolution.
pub const PATCH: usize = 4;
pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub state: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub direction_count: usize,
    pub num_classes: usize,
    pub t_max: usize,
    pub height: usize,
    pub width: usize,
    pub audio_dim: usize,
    #[serde(default)]
    pub scan: ScanImpl,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            state: 16,
            encoder_layers: 2,
            decoder_layers: 2,
            direction_count: DEFAULT_DIRECTIONS,
            num_classes: 1,
            t_max: 10,
            height: 64,
            width: 64,
            audio_dim: 64,
            scan: ScanImpl::Sequential,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1".into());
        }
        if !DIRECTION_COUNTS.contains(&self.direction_count) {
            return bad(format!(
                "direction_count {} not in {DIRECTION_COUNTS:?}",
                self.direction_count
            ));
        }
        let stride = PATCH << (STAGES - 1);
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(stride)
            || !self.width.is_multiple_of(stride)
        {
            return bad(format!(
                "input extents {}x{} must be positive multiples of {stride}",
                self.height, self.width
            ));
        }
        if self.channels == 0 || self.state == 0 || self.num_classes == 0 || self.t_max == 0 || self.audio_dim == 0 {
            return bad("channels, state, num_classes, t_max and audio_dim must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Extents `(h, w)` of scale `i` (0-based, stride `4·2^i`).
    pub fn extent(&self, i: usize) -> (usize, usize) {
        let s = PATCH << i;
        (self.height / s, self.width / s)
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            scan: self.scan,
            ..BlockDims::new(self.channels, self.state)
        }
    }
}

/// Zero-padded clip input.
#[derive(Debug, Clone)]
pub struct ClipInput<T> {
    /// `[T_max, H, W, 3]`.
    pub video: Tensor<T>,
    /// `[T_max, A]`.
    pub audio: Tensor<T>,
    /// 1 for real frames, 0 for padding.
    pub valid: Vec<f64>,
}

impl<T: Element> ClipInput<T> {
    /// Pads `video: [T, H, W, 3]` and `audio: [T, A]` to `t_max` frames.
    pub fn pad(video: &Tensor<T>, audio: &Tensor<T>, t_max: usize) -> Result<Self> {
        let t = video.shape().first().copied().unwrap_or(0);
        if t > t_max {
            return Err(Error::Invalid(format!("clip of {t} frames exceeds T_max={t_max}")));
        }
        if audio.shape().first() != Some(&t) || audio.rank() != 2 || video.rank() != 4 {
            return Err(Error::Shape(format!(
                "video {:?} and audio {:?} disagree",
                video.shape(),
                audio.shape()
            )));
        }
        Ok(Self {
            video: pad_frames(video, t_max),
            audio: pad_frames(audio, t_max),
            valid: (0..t_max).map(|i| if i < t { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn frames(&self) -> usize {
        self.valid.len()
    }
}

/// Zero-pads the leading axis to `frames`.
pub fn pad_frames<T: Element>(x: &Tensor<T>, frames: usize) -> Tensor<T> {
    let mut shape = x.shape().to_vec();
    let per: usize = shape[1..].iter().product();
    let mut data = x.data().to_vec();
    data.resize(frames * per, T::zero());
    shape[0] = frames;
    Tensor::new(shape, data).expect("padded shape")
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegmentationOutput {
    /// `[T, h1, w1, N_class]`.
    pub mask_logits: Var,
    /// `[T, h1, w1, 1]`.
    pub intermediate_mask: Var,
    /// `[T, h1, w1, C]`.
    pub mask_feature: Var,
    /// `[T, C]`.
    pub audio_query_out: Var,
    /// Scale-1 features before the pyramid, `[T, h1, w1, C]`.
    pub pre_pyramid: Var,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    vss: VssBlock,
    temporal: TemporalBlock,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    frame: V2aBlock,
    temporal: V2aBlock,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    proj: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    hidden1: Linear,
    hidden2: Linear,
    fc: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    stages: [Stage; STAGES],
    audio: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    pyramid: Vec<ContextFusionBlock>,
    head: Head,
}

impl Model {
    /// Registers all parameters in `store`, drawing initial values from `rng`.
    pub fn new<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let dims = config.dims();
        let dirs = direction_set(config.direction_count)?;
        let pb = &mut ParamBuilder::new(store, rng);
        let stages = std::array::from_fn(|i| {
            let din = if i == 0 { 3 * PATCH * PATCH } else { 4 * c };
            pb.scope(&format!("stem.stage{}", i + 1), |pb| Stage {
                proj: Linear::new(pb, "proj", din, c, true),
                norm: LayerNorm::new(pb, "norm", c),
            })
        });
        let audio = Linear::new(pb, "stem.audio", config.audio_dim, c, true);
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                pb.scope(&format!("encoder{l}"), |pb| EncoderLayer {
                    vss: VssBlock::new(pb, "vss", dims),
                    temporal: TemporalBlock::new(pb, "temporal", dims, &dirs),
                })
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| {
                pb.scope(&format!("decoder{l}"), |pb| DecoderLayer {
                    frame: V2aBlock::new(pb, "v2a_frame", dims, V2aLevel::Frame),
                    temporal: V2aBlock::new(pb, "v2a_temporal", dims, V2aLevel::Temporal),
                })
            })
            .collect();
        let pyramid = (0..STAGES)
            .map(|i| ContextFusionBlock::new(pb, &format!("pyramid.scale{}", i + 1), dims, &dirs))
            .collect();
        let head = pb.scope("head", |pb| Head {
            hidden1: Linear::new(pb, "hidden1", c + 1, c, true),
            hidden2: Linear::new(pb, "hidden2", c, c, true),
            fc: Linear::new(pb, "fc", c, config.num_classes, true),
        });
        Ok(Self {
            config: config.clone(),
            stages,
            audio,
            encoder,
            decoder,
            pyramid,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same weights with the spatio-temporal scans using `count` directions.
    pub fn with_directions(&self, count: usize) -> Result<Self> {
        let dirs = direction_set(count)?;
        let mut m = self.clone();
        m.config.direction_count = count;
        for l in &mut m.encoder {
            l.temporal = l.temporal.with_directions(&dirs);
        }
        for b in &mut m.pyramid {
            b.temporal = b.temporal.with_directions(&dirs);
        }
        Ok(m)
    }

    pub fn directions(&self) -> Vec<Direction> {
        direction_set(self.config.direction_count).expect("validated")
    }

    /// Names of the parameters whose zeroing turns each block into the
    /// identity: the output projections of every gate.
    pub fn inner_path_outputs(&self) -> Vec<crate::autodiff::ParamId> {
        let mut ids = Vec::new();
        let mut gate = |g: &crate::ssm::Gate| {
            ids.push(g.out.w);
            ids.extend(g.out.b);
        };
        for l in &self.encoder {
            gate(&l.vss.gate);
            gate(&l.temporal.gate);
        }
        for l in &self.decoder {
            gate(&l.frame.gate);
            gate(&l.temporal.gate);
        }
        for b in &self.pyramid {
            gate(&b.temporal.gate);
            gate(&b.a2v.gate);
        }
        ids
    }

    /// Visual pyramid `[T, h_i, w_i, C]` for `i = 1..4` from `video: [T, H, W, 3]`.
    pub fn visual_stem<T: Element>(&self, g: &mut Graph<'_, T>, video: Var) -> Result<Vec<Var>> {
        let (h, w) = match *g.shape(video) {
            [_, h, w, 3] => (h, w),
            ref s => return Err(Error::Shape(format!("video {s:?}, expected [T, H, W, 3]"))),
        };
        let stride = PATCH << (STAGES - 1);
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!("video extents {h}x{w} not divisible by {stride}")));
        }
        let mut scales = Vec::with_capacity(STAGES);
        let mut x = patchify(g, video, PATCH)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = patchify(g, *scales.last().unwrap(), 2)?;
            }
            let p = stage.proj.forward(g, x)?;
            scales.push(stage.norm.forward(g, p)?);
        }
        Ok(scales)
    }

    /// Audio features `[T, C]` from descriptors `[T, A]`.
    pub fn audio_stem<T: Element>(&self, g: &mut Graph<'_, T>, audio: Var) -> Result<Var> {
        self.audio.forward(g, audio)
    }

    /// `encoder_layers × (VSS → temporal)` over scales 2..4.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, scales: &[Var]) -> Result<Vec<Var>> {
        let mut x = scales.to_vec();
        for l in &self.encoder {
            x = l.vss.forward(g, &x)?;
            x = l.temporal.forward(g, &x)?;
        }
        Ok(x)
    }

    /// `decoder_layers × (per scale: frame-level then temporal-level fusion)`.
    pub fn decode<T: Element>(&self, g: &mut Graph<'_, T>, scales: &[Var], audio: Var) -> Result<Var> {
        let mut a = audio;
        for l in &self.decoder {
            for &v in scales {
                a = l.frame.forward(g, v, a)?;
                a = l.temporal.forward(g, v, a)?;
            }
        }
        Ok(a)
    }

    /// Top-down pyramid over `scales` (fine to coarse, scale 1 first).
    pub fn pyramid<T: Element>(&self, g: &mut Graph<'_, T>, scales: &[Var], audio: Var) -> Result<Var> {
        if scales.len() != self.pyramid.len() {
            return Err(Error::Shape(format!(
                "pyramid expects {} scales, got {}",
                self.pyramid.len(),
                scales.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (block, &v) in self.pyramid.iter().zip(scales).rev() {
            let f = block.forward(g, v, audio)?;
            acc = Some(match acc {
                None => f,
                Some(prev) => {
                    let (h, w) = (g.shape(f)[1], g.shape(f)[2]);
                    let up = g.upsample_bilinear(prev, h, w)?;
                    g.add(f, up)
                }
            });
        }
        Ok(acc.expect("nonempty pyramid"))
    }

    /// Intermediate mask and logits from the mask feature and audio query.
    pub fn head<T: Element>(&self, g: &mut Graph<'_, T>, feature: Var, query: Var) -> Result<(Var, Var)> {
        let im = g.frame_dot(feature, query)?;
        let x = g.concat_last(feature, im)?;
        let x = self.head.hidden1.forward(g, x)?;
        let x = g.silu(x);
        let x = self.head.hidden2.forward(g, x)?;
        let x = g.silu(x);
        let logits = self.head.fc.forward(g, x)?;
        Ok((im, logits))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, clip: &ClipInput<T>) -> Result<SegmentationOutput> {
        let cfg = &self.config;
        let video_shape = [clip.frames(), cfg.height, cfg.width, 3];
        if clip.video.shape() != video_shape || clip.audio.shape() != [clip.frames(), cfg.audio_dim] {
            return Err(Error::Shape(format!(
                "clip video {:?} / audio {:?} do not match config",
                clip.video.shape(),
                clip.audio.shape()
            )));
        }
        let video = g.constant(clip.video.clone());
        let audio = g.constant(clip.audio.clone());
        let scales = self.visual_stem(g, video)?;
        let a0 = self.audio_stem(g, audio)?;
        let encoded = self.encode(g, &scales[1..])?;
        let a1 = self.decode(g, &encoded, a0)?;
        let mut all = vec![scales[0]];
        all.extend(&encoded);
        let feature = self.pyramid(g, &all, a0)?;
        let (im, logits) = self.head(g, feature, a1)?;
        Ok(SegmentationOutput {
            mask_logits: logits,
            intermediate_mask: im,
            mask_feature: feature,
            audio_query_out: a1,
            pre_pyramid: scales[0],
        })
    }
}

/// Space-to-depth: `[T, H, W, C]` to `[T, H/p, W/p, p·p·C]`.
pub fn patchify<T: Element>(g: &mut Graph<'_, T>, x: Var, p: usize) -> Result<Var> {
    let (t, h, w, c) = match *g.shape(x) {
        [t, h, w, c] => (t, h, w, c),
        ref s => return Err(Error::Shape(format!("patchify: {s:?}"))),
    };
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("patchify: {h}x{w} not divisible by {p}")));
    }
    let x = g.reshape(x, &[t, h / p, p, w / p, p, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[t, h / p, w / p, p * p * c])
}

/// Training target at logit resolution: the fraction of each `4×4` cell
/// covered by the mask, per class channel.
///
/// `masks: [T, H, W]` of class ids (0 = background). Binary tasks
/// (`num_classes == 1`) use foreground-vs-background.
pub fn pooled_targets<T: Element>(masks: &Tensor<T>, num_classes: usize, factor: usize) -> Result<Tensor<T>> {
    let (t, h, w) = match *masks.shape() {
        [t, h, w] => (t, h, w),
        ref s => return Err(Error::Shape(format!("masks {s:?}, expected [T, H, W]"))),
    };
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("masks {h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0f64; t * oh * ow * num_classes];
    let inv = 1.0 / (factor * factor) as f64;
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let id = masks.data()[(f * h + y) * w + x].as_f64() as usize;
                if id == 0 {
                    continue;
                }
                let ch = if num_classes == 1 { 0 } else { id - 1 };
                if ch >= num_classes {
                    return Err(Error::Invalid(format!("class id {id} exceeds {num_classes} classes")));
                }
                out[((f * oh + y / factor) * ow + x / factor) * num_classes + ch] += inv;
            }
        }
    }
    Tensor::new([t, oh, ow, num_classes], out.into_iter().map(T::of).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    S4,
    Ms3,
    Semantic,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::S4 => "s4",
            Task::Ms3 => "ms3",
            Task::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s4" => Ok(Task::S4),
            "ms3" => Ok(Task::Ms3),
            "semantic" => Ok(Task::Semantic),
            _ => Err(Error::Invalid(format!("unknown task {s:?}"))),
        }
    }
}

/// Dice on sigmoid probabilities for single-class outputs, per-class binary
/// cross-entropy otherwise. Padded frames carry zero weight.
pub fn segmentation_loss<T: Element>(
    g: &mut Graph<'_, T>,
    logits: Var,
    masks: &Tensor<T>,
    valid: &[f64],
    num_classes: usize,
) -> Result<Var> {
    let target = pooled_targets(masks, num_classes, PATCH)?;
    if num_classes == 1 {
        g.dice_loss(logits, &target, valid)
    } else {
        g.bce_with_logits(logits, &target, valid)
    }
}
