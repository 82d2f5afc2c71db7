//! Composite blocks built from the scan kernel and the scan layouts.
//!
//! Visual features are `[T, h, w, C]` per scale, audio features `[T, C]`.
//! Every block ends in a [`Gate`] whose output projection can be zeroed to
//! turn the block into the identity.

use crate::autodiff::{Graph, ParamBuilder, Var};
use crate::error::{Error, Result};
use crate::layout::{cross_modal_set, AudioAttach, Direction, Extent, ScanLayout};
use crate::nn::{DwConv, LayerNorm, Linear};
use crate::ssm::{Gate, ScanImpl, SsmParams};
use crate::tensor::Element;

/// Width settings shared by all blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    /// Model width `C`.
    pub dim: usize,
    /// Inner width of the scan path.
    pub inner: usize,
    /// State size `N`.
    pub state: usize,
    pub scan: ScanImpl,
}

impl BlockDims {
    /// Inner width `2C`.
    pub fn new(dim: usize, state: usize) -> Self {
        Self {
            dim,
            inner: 2 * dim,
            state,
            scan: ScanImpl::Sequential,
        }
    }
}

pub const CONV2D: [usize; 2] = [3, 3];
pub const CONV3D: [usize; 3] = [3, 3, 3];
pub const CONV1D: [usize; 1] = [3];

/// Frame count and extent of a `[T, h, w, C]` map.
pub fn map_geometry<T: Element>(g: &Graph<'_, T>, x: Var) -> Result<(usize, Extent, usize)> {
    match *g.shape(x) {
        [t, h, w, c] => Ok((t, Extent::new(h, w), c)),
        ref s => Err(Error::Shape(format!("feature map {s:?}, expected [T, h, w, C]"))),
    }
}

/// Stacks `[T, h_i, w_i, C]` maps into canonical rows `[Σ T h_i w_i, C]`.
pub fn stack_rows<T: Element>(g: &mut Graph<'_, T>, maps: &[Var]) -> Result<(Var, Vec<Extent>, usize)> {
    if maps.is_empty() {
        return Err(Error::Shape("missing scale".into()));
    }
    let (frames, _, c) = map_geometry(g, maps[0])?;
    let mut rows = Vec::with_capacity(maps.len());
    let mut extents = Vec::with_capacity(maps.len());
    for &m in maps {
        let (t, e, cc) = map_geometry(g, m)?;
        if t != frames || cc != c {
            return Err(Error::Shape(format!(
                "scale with T={t}, C={cc}; expected T={frames}, C={c}"
            )));
        }
        extents.push(e);
        rows.push(g.reshape(m, &[t * e.area(), c])?);
    }
    let stacked = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)?
    };
    Ok((stacked, extents, frames))
}

/// Inverse of [`stack_rows`].
pub fn unstack_rows<T: Element>(
    g: &mut Graph<'_, T>,
    rows: Var,
    extents: &[Extent],
    frames: usize,
) -> Result<Vec<Var>> {
    let c = *g.shape(rows).last().unwrap();
    let total: usize = extents.iter().map(|e| frames * e.area()).sum();
    let mut out = Vec::with_capacity(extents.len());
    let mut off = 0;
    for e in extents {
        let n = frames * e.area();
        let part = if extents.len() == 1 && n == total {
            rows
        } else {
            g.slice_rows(rows, off, off + n)?
        };
        out.push(g.reshape(part, &[frames, e.h, e.w, c])?);
        off += n;
    }
    Ok(out)
}

/// Gathers canonical rows `[R, E]` into the layout's sequences, scans them
/// and scatter-adds the outputs back to `[R, E]`.
pub fn scan_layout<T: Element>(
    g: &mut Graph<'_, T>,
    ssm: &SsmParams,
    layout: &ScanLayout,
    rows: Var,
    scan: ScanImpl,
) -> Result<Var> {
    let e = *g.shape(rows).last().unwrap();
    if g.shape(rows)[0] != layout.rows() {
        return Err(Error::Shape(format!(
            "layout of {} rows applied to {:?}",
            layout.rows(),
            g.shape(rows)
        )));
    }
    let flat = g.gather_rows(rows, layout.index().clone())?;
    let seqs = g.reshape(flat, &[layout.seqs(), layout.len(), e])?;
    let y = ssm.forward(g, seqs, scan)?;
    let y = g.reshape(y, &[layout.seqs() * layout.len(), e])?;
    g.scatter_rows(y, layout.index().clone(), layout.rows())
}

/// Norm, input projection and depthwise convolution of one visual map;
/// returns rows `[T h w, E]`.
#[derive(Debug, Clone, Copy)]
struct VisualIn {
    norm: LayerNorm,
    proj: Linear,
    conv: DwConv,
    temporal: bool,
}

impl VisualIn {
    fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, dims: BlockDims, kernel: &[usize]) -> Self {
        Self {
            norm: LayerNorm::new(pb, "norm", dims.dim),
            proj: Linear::new(pb, "proj_in", dims.dim, dims.inner, true),
            conv: DwConv::new(pb, "conv", kernel, dims.inner),
            temporal: kernel.len() == 3,
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, activate: bool) -> Result<Var> {
        let (t, e, _) = map_geometry(g, x)?;
        let n = self.norm.forward(g, x)?;
        let p = self.proj.forward(g, n)?;
        let c = if self.temporal {
            self.conv.conv3d(g, p)?
        } else {
            self.conv.conv2d(g, p)?
        };
        let c = if activate { g.silu(c) } else { c };
        let inner = *g.shape(c).last().unwrap();
        g.reshape(c, &[t * e.area(), inner])
    }
}

/// Planar cross-scan over all scales of each frame.
#[derive(Debug, Clone, Copy)]
pub struct VssBlock {
    input: VisualIn,
    pub ssm: SsmParams,
    pub gate: Gate,
    scan: ScanImpl,
}

impl VssBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dims: BlockDims) -> Self {
        pb.scope(name, |pb| Self {
            input: VisualIn::new(pb, dims, &CONV2D),
            ssm: SsmParams::new(pb, "ssm", dims.inner, dims.state),
            gate: Gate::new(pb, "gate", dims.dim, dims.inner),
            scan: dims.scan,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, scales: &[Var]) -> Result<Vec<Var>> {
        let (x, extents, frames) = stack_rows(g, scales)?;
        let inner: Vec<Var> = scales
            .iter()
            .map(|&s| self.input.forward(g, s, true))
            .collect::<Result<_>>()?;
        let u = if inner.len() == 1 {
            inner[0]
        } else {
            g.concat_rows(&inner)?
        };
        let layout = ScanLayout::per_frame(&extents, frames, AudioAttach::None)?;
        let y = scan_layout(g, &self.ssm, &layout, u, self.scan)?;
        let out = self.gate.forward(g, y, x, x)?;
        unstack_rows(g, out, &extents, frames)
    }
}

/// Spatio-temporal scan over all scales and frames.
#[derive(Debug, Clone)]
pub struct TemporalBlock {
    input: VisualIn,
    pub ssm: SsmParams,
    pub gate: Gate,
    directions: Vec<Direction>,
    scan: ScanImpl,
}

impl TemporalBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: BlockDims,
        directions: &[Direction],
    ) -> Self {
        pb.scope(name, |pb| Self {
            input: VisualIn::new(pb, dims, &CONV3D),
            ssm: SsmParams::new(pb, "ssm", dims.inner, dims.state),
            gate: Gate::new(pb, "gate", dims.dim, dims.inner),
            directions: directions.to_vec(),
            scan: dims.scan,
        })
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    /// Same weights scanned with a different direction set.
    pub fn with_directions(&self, directions: &[Direction]) -> Self {
        Self {
            directions: directions.to_vec(),
            ..self.clone()
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, scales: &[Var]) -> Result<Vec<Var>> {
        let (x, extents, frames) = stack_rows(g, scales)?;
        let inner: Vec<Var> = scales
            .iter()
            .map(|&s| self.input.forward(g, s, true))
            .collect::<Result<_>>()?;
        let u = if inner.len() == 1 {
            inner[0]
        } else {
            g.concat_rows(&inner)?
        };
        let layout = ScanLayout::spatiotemporal(&extents, frames, &self.directions, AudioAttach::None)?;
        let y = scan_layout(g, &self.ssm, &layout, u, self.scan)?;
        let out = self.gate.forward(g, y, x, x)?;
        unstack_rows(g, out, &extents, frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V2aLevel {
    Frame,
    Temporal,
}

/// Audio projection: norm, linear, causal 1D convolution; `[T, C]` to `[T, E]`.
#[derive(Debug, Clone, Copy)]
struct AudioIn {
    norm: LayerNorm,
    proj: Linear,
    conv: DwConv,
}

impl AudioIn {
    fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, dims: BlockDims) -> Self {
        pb.scope("audio", |pb| Self {
            norm: LayerNorm::new(pb, "norm", dims.dim),
            proj: Linear::new(pb, "proj_in", dims.dim, dims.inner, true),
            conv: DwConv::new(pb, "conv", &CONV1D, dims.inner),
        })
    }

    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, a: Var) -> Result<Var> {
        let n = self.norm.forward(g, a)?;
        let p = self.proj.forward(g, n)?;
        self.conv.causal1d(g, p)
    }
}

fn check_audio<T: Element>(g: &Graph<'_, T>, audio: Var, frames: usize, dim: usize) -> Result<()> {
    if g.shape(audio) != [frames, dim] {
        return Err(Error::Shape(format!(
            "audio {:?} does not match {frames} frames of width {dim}",
            g.shape(audio)
        )));
    }
    Ok(())
}

/// Vision-to-audio fusion: audio tokens are scanned after the visual tokens
/// and only the audio outputs are kept.
#[derive(Debug, Clone, Copy)]
pub struct V2aBlock {
    visual: VisualIn,
    audio: AudioIn,
    pub ssm: SsmParams,
    pub gate: Gate,
    level: V2aLevel,
    scan: ScanImpl,
}

impl V2aBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dims: BlockDims, level: V2aLevel) -> Self {
        pb.scope(name, |pb| Self {
            visual: pb.scope("visual", |pb| VisualIn::new(pb, dims, &CONV2D)),
            audio: AudioIn::new(pb, dims),
            ssm: SsmParams::new(pb, "ssm", dims.inner, dims.state),
            gate: Gate::new(pb, "gate", dims.dim, dims.inner),
            level,
            scan: dims.scan,
        })
    }

    pub fn level(&self) -> V2aLevel {
        self.level
    }

    /// `visual: [T, h, w, C]`, `audio: [T, C]` → updated audio `[T, C]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, visual: Var, audio: Var) -> Result<Var> {
        let (frames, extent, dim) = map_geometry(g, visual)?;
        check_audio(g, audio, frames, dim)?;
        let v = self.visual.forward(g, visual, false)?;
        let a = self.audio.forward(g, audio)?;
        let rows = g.concat_rows(&[v, a])?;
        let layout = match self.level {
            V2aLevel::Frame => ScanLayout::per_frame(&[extent], frames, AudioAttach::Append)?,
            V2aLevel::Temporal => {
                ScanLayout::spatiotemporal(&[extent], frames, &cross_modal_set(), AudioAttach::Append)?
            }
        };
        let y = scan_layout(g, &self.ssm, &layout, rows, self.scan)?;
        let vr = layout.visual_rows();
        let f_out = g.slice_rows(y, vr, vr + frames)?;
        self.gate.forward(g, f_out, audio, audio)
    }
}

/// Audio-to-vision scan: audio tokens lead every sequence and only the visual
/// outputs are kept.
#[derive(Debug, Clone, Copy)]
pub struct A2vBlock {
    visual: VisualIn,
    audio: AudioIn,
    pub ssm: SsmParams,
    pub gate: Gate,
    scan: ScanImpl,
}

impl A2vBlock {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, name: &str, dims: BlockDims) -> Self {
        pb.scope(name, |pb| Self {
            visual: pb.scope("visual", |pb| VisualIn::new(pb, dims, &CONV2D)),
            audio: AudioIn::new(pb, dims),
            ssm: SsmParams::new(pb, "ssm", dims.inner, dims.state),
            gate: Gate::new(pb, "gate", dims.dim, dims.inner),
            scan: dims.scan,
        })
    }

    /// `visual: [T, h, w, C]`, `audio: [T, C]` → updated visual `[T, h, w, C]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, visual: Var, audio: Var) -> Result<Var> {
        let (frames, extent, dim) = map_geometry(g, visual)?;
        check_audio(g, audio, frames, dim)?;
        let x = g.reshape(visual, &[frames * extent.area(), dim])?;
        let v = self.visual.forward(g, visual, false)?;
        let a = self.audio.forward(g, audio)?;
        let rows = g.concat_rows(&[v, a])?;
        let layout = ScanLayout::spatiotemporal(&[extent], frames, &cross_modal_set(), AudioAttach::Prepend)?;
        let y = scan_layout(g, &self.ssm, &layout, rows, self.scan)?;
        let f = g.slice_rows(y, 0, layout.visual_rows())?;
        let out = self.gate.forward(g, f, x, x)?;
        g.reshape(out, &[frames, extent.h, extent.w, dim])
    }
}

/// Single-scale temporal block followed by audio-to-vision fusion.
#[derive(Debug, Clone)]
pub struct ContextFusionBlock {
    pub temporal: TemporalBlock,
    pub a2v: A2vBlock,
}

impl ContextFusionBlock {
    pub fn new<T: Element>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dims: BlockDims,
        directions: &[Direction],
    ) -> Self {
        pb.scope(name, |pb| Self {
            temporal: TemporalBlock::new(pb, "temporal", dims, directions),
            a2v: A2vBlock::new(pb, "a2v", dims),
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, visual: Var, audio: Var) -> Result<Var> {
        let v = self.temporal.forward(g, &[visual])?.remove(0);
        self.a2v.forward(g, v, audio)
    }
}
