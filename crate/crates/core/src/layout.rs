//! Serialization of multi-scale feature maps (plus optional audio tokens) into
//! scan sequences, and the inverse maps.
//!
//! Every layout works on *canonical rows*: the visual scales, ordered fine to
//! coarse, each flattened as `[T, h, w]` row-major, followed by `T` audio rows
//! when audio is attached. A layout is a table `index[s * len + p]` giving the
//! canonical row read at position `p` of sequence `s`; flattening gathers rows
//! through it and merging scatter-adds back.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Axis order of a serialization, outermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Order {
    Hw,
    Wh,
    Thw,
    Twh,
    Hwt,
    Wht,
    Htw,
    Wth,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::Hw => "HW",
            Order::Wh => "WH",
            Order::Thw => "THW",
            Order::Twh => "TWH",
            Order::Hwt => "HWT",
            Order::Wht => "WHT",
            Order::Htw => "HTW",
            Order::Wth => "WTH",
        }
    }

    /// Axes outermost first, as indices into `(t, y, x)`.
    fn axes(self) -> [usize; 3] {
        match self {
            Order::Hw | Order::Thw => [0, 1, 2],
            Order::Wh | Order::Twh => [0, 2, 1],
            Order::Hwt => [1, 2, 0],
            Order::Wht => [2, 1, 0],
            Order::Htw => [1, 0, 2],
            Order::Wth => [2, 0, 1],
        }
    }

    fn is_planar(self) -> bool {
        matches!(self, Order::Hw | Order::Wh)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Direction {
    pub order: Order,
    pub reversed: bool,
}

impl Direction {
    pub const fn fwd(order: Order) -> Self {
        Self { order, reversed: false }
    }

    pub const fn rev(order: Order) -> Self {
        Self { order, reversed: true }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.order.name(), if self.reversed { '-' } else { '+' })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown scan direction {s:?}"));
        let (body, sign) = s.split_at(s.len().checked_sub(1).ok_or_else(bad)?);
        let reversed = match sign {
            "+" => false,
            "-" | "−" => true,
            _ => return Err(bad()),
        };
        let order = [
            Order::Hw,
            Order::Wh,
            Order::Thw,
            Order::Twh,
            Order::Hwt,
            Order::Wht,
            Order::Htw,
            Order::Wth,
        ]
        .into_iter()
        .find(|o| o.name() == body)
        .ok_or_else(bad)?;
        Ok(Self { order, reversed })
    }
}

/// The four planar directions in sequence order `[HW+, WH+, HW-, WH-]`.
pub const PLANAR: [Direction; 4] = [
    Direction::fwd(Order::Hw),
    Direction::fwd(Order::Wh),
    Direction::rev(Order::Hw),
    Direction::rev(Order::Wh),
];

pub const DIRECTION_COUNTS: [usize; 6] = [2, 4, 6, 8, 10, 12];
pub const DEFAULT_DIRECTIONS: usize = 8;

/// Spatio-temporal direction set of the given size: forward orders in the
/// sequence `THW, TWH, HWT, WHT, HTW, WTH` truncated to `count / 2`, then
/// their reversals in the same order.
pub fn direction_set(count: usize) -> Result<Vec<Direction>> {
    if !DIRECTION_COUNTS.contains(&count) {
        return Err(Error::Config(format!(
            "direction count {count} not in {DIRECTION_COUNTS:?}"
        )));
    }
    let orders = [Order::Thw, Order::Twh, Order::Hwt, Order::Wht, Order::Htw, Order::Wth];
    let fwd = &orders[..count / 2];
    Ok(fwd
        .iter()
        .map(|&o| Direction::fwd(o))
        .chain(fwd.iter().map(|&o| Direction::rev(o)))
        .collect())
}

/// The four directions used by cross-modal temporal scans.
pub fn cross_modal_set() -> Vec<Direction> {
    direction_set(4).expect("4 is a supported count")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn area(self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioAttach {
    None,
    Append,
    Prepend,
}

/// What a canonical row holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Visual { scale: usize, t: usize, y: usize, x: usize },
    Audio { t: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    /// One sequence per (direction, frame); sequence `s = dir * T + t`.
    PerFrame,
    /// One sequence per direction spanning all frames.
    Spatiotemporal,
}

#[derive(Debug, Clone)]
pub struct ScanLayout {
    kind: LayoutKind,
    directions: Vec<Direction>,
    extents: Vec<Extent>,
    frames: usize,
    attach: AudioAttach,
    seqs: usize,
    len: usize,
    index: Rc<[usize]>,
}

impl ScanLayout {
    /// Four planar directions per frame over the concatenation of all scales
    /// of that frame. Attached audio token `t` sits last (or first) in every
    /// sequence of frame `t`, reversed or not.
    pub fn per_frame(extents: &[Extent], frames: usize, attach: AudioAttach) -> Result<Self> {
        check_extents(extents, frames)?;
        let offsets = scale_offsets(extents, frames);
        let visual = *offsets.last().unwrap();
        let mut index = Vec::new();
        for dir in PLANAR {
            for t in 0..frames {
                let mut seq = Vec::new();
                for (s, e) in extents.iter().enumerate() {
                    push_order(&mut seq, dir.order, 1, e.h, e.w, |_, y, x| {
                        offsets[s] + (t * e.h + y) * e.w + x
                    });
                }
                if dir.reversed {
                    seq.reverse();
                }
                match attach {
                    AudioAttach::None => {}
                    AudioAttach::Append => seq.push(visual + t),
                    AudioAttach::Prepend => seq.insert(0, visual + t),
                }
                index.extend(seq);
            }
        }
        let seqs = PLANAR.len() * frames;
        Ok(Self {
            kind: LayoutKind::PerFrame,
            directions: PLANAR.to_vec(),
            extents: extents.to_vec(),
            frames,
            attach,
            seqs,
            len: index.len() / seqs,
            index: index.into(),
        })
    }

    /// One sequence per direction over all frames: each scale is serialized in
    /// the direction's axis order and the scales are concatenated fine to
    /// coarse; reversed directions reverse the whole concatenation.
    ///
    /// Appended audio follows the visual tokens in forward sequences and the
    /// reversed sequences are full reversals, so audio leads. Prepended audio
    /// precedes the visual tokens in time order for forward directions and in
    /// reversed time order for reversed directions.
    pub fn spatiotemporal(
        extents: &[Extent],
        frames: usize,
        directions: &[Direction],
        attach: AudioAttach,
    ) -> Result<Self> {
        check_extents(extents, frames)?;
        if directions.is_empty() {
            return Err(Error::Config("empty direction set".into()));
        }
        if let Some(d) = directions.iter().find(|d| d.order.is_planar()) {
            return Err(Error::Config(format!("{d} is not a spatio-temporal direction")));
        }
        let offsets = scale_offsets(extents, frames);
        let visual = *offsets.last().unwrap();
        let mut index = Vec::new();
        for dir in directions {
            let mut seq = Vec::new();
            for (s, e) in extents.iter().enumerate() {
                push_order(&mut seq, dir.order, frames, e.h, e.w, |t, y, x| {
                    offsets[s] + (t * e.h + y) * e.w + x
                });
            }
            let audio = (0..frames).map(|t| visual + t);
            match (attach, dir.reversed) {
                (AudioAttach::None, false) => {}
                (AudioAttach::None, true) => seq.reverse(),
                (AudioAttach::Append, rev) => {
                    seq.extend(audio);
                    if rev {
                        seq.reverse();
                    }
                }
                (AudioAttach::Prepend, false) => {
                    seq.splice(0..0, audio);
                }
                (AudioAttach::Prepend, true) => {
                    seq.reverse();
                    seq.splice(0..0, audio.rev());
                }
            }
            index.extend(seq);
        }
        let seqs = directions.len();
        Ok(Self {
            kind: LayoutKind::Spatiotemporal,
            directions: directions.to_vec(),
            extents: extents.to_vec(),
            frames,
            attach,
            seqs,
            len: index.len() / seqs,
            index: index.into(),
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn extents(&self) -> &[Extent] {
        &self.extents
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn attach(&self) -> AudioAttach {
        self.attach
    }

    /// Number of sequences.
    pub fn seqs(&self) -> usize {
        self.seqs
    }

    /// Length of every sequence.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self) -> &Rc<[usize]> {
        &self.index
    }

    pub fn visual_rows(&self) -> usize {
        self.frames * self.extents.iter().map(|e| e.area()).sum::<usize>()
    }

    pub fn audio_rows(&self) -> usize {
        match self.attach {
            AudioAttach::None => 0,
            _ => self.frames,
        }
    }

    /// Canonical rows: visual then audio.
    pub fn rows(&self) -> usize {
        self.visual_rows() + self.audio_rows()
    }

    /// Direction of sequence `s`.
    pub fn direction_of(&self, s: usize) -> Direction {
        match self.kind {
            LayoutKind::PerFrame => self.directions[s / self.frames],
            LayoutKind::Spatiotemporal => self.directions[s],
        }
    }

    /// Frame of sequence `s` for per-frame layouts.
    pub fn frame_of(&self, s: usize) -> Option<usize> {
        match self.kind {
            LayoutKind::PerFrame => Some(s % self.frames),
            LayoutKind::Spatiotemporal => None,
        }
    }

    /// Sequences belonging to direction number `d`.
    pub fn sequences_of(&self, d: usize) -> std::ops::Range<usize> {
        match self.kind {
            LayoutKind::PerFrame => d * self.frames..(d + 1) * self.frames,
            LayoutKind::Spatiotemporal => d..d + 1,
        }
    }

    pub fn token(&self, row: usize) -> Token {
        let visual = self.visual_rows();
        if row >= visual {
            return Token::Audio { t: row - visual };
        }
        let mut off = 0;
        for (scale, e) in self.extents.iter().enumerate() {
            let n = self.frames * e.area();
            if row < off + n {
                let r = row - off;
                return Token::Visual {
                    scale,
                    t: r / e.area(),
                    y: (r % e.area()) / e.w,
                    x: r % e.w,
                };
            }
            off += n;
        }
        unreachable!("row {row} outside layout")
    }

    /// Positions (flat `s * len + p`) that hold audio tokens.
    pub fn audio_positions(&self) -> Vec<usize> {
        let visual = self.visual_rows();
        (0..self.index.len()).filter(|&i| self.index[i] >= visual).collect()
    }

    /// Checks that the sequences of each direction visit every canonical row
    /// exactly once. Per-frame layouts visit each row of frame `t` once in the
    /// sequences of frame `t`, which together cover all rows.
    pub fn validate(&self) -> Result<()> {
        let rows = self.rows();
        if self.index.len() != self.seqs * self.len {
            return Err(Error::Invalid("layout index length".into()));
        }
        for d in 0..self.directions.len() {
            let mut seen = vec![false; rows];
            for s in self.sequences_of(d) {
                for &r in &self.index[s * self.len..(s + 1) * self.len] {
                    if r >= rows || std::mem::replace(&mut seen[r], true) {
                        return Err(Error::Invalid(format!("row {r} repeated or out of range")));
                    }
                }
            }
            if seen.iter().any(|&v| !v) {
                return Err(Error::Invalid(format!("direction {} misses rows", self.directions[d])));
            }
        }
        Ok(())
    }

    /// Canonical rows `[R, C]` to sequences `[S, L, C]`.
    pub fn flatten<T: Element>(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check_rows(rows)?;
        let mut out = Vec::with_capacity(self.index.len() * c);
        for &r in self.index.iter() {
            out.extend_from_slice(&rows.data()[r * c..(r + 1) * c]);
        }
        Tensor::new([self.seqs, self.len, c], out)
    }

    /// Sum over all sequences of the un-permuted outputs: `[S, L, C]` to `[R, C]`.
    pub fn merge<T: Element>(&self, seqs: &Tensor<T>) -> Result<Tensor<T>> {
        self.scatter(seqs, 0..self.seqs)
    }

    /// Inverse of [`flatten`](Self::flatten) restricted to direction number `d`.
    pub fn unflatten<T: Element>(&self, seqs: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
        if d >= self.directions.len() {
            return Err(Error::Invalid(format!("direction {d} out of range")));
        }
        self.scatter(seqs, self.sequences_of(d))
    }

    fn scatter<T: Element>(&self, seqs: &Tensor<T>, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
        let c = match seqs.shape() {
            [s, l, c] if *s == self.seqs && *l == self.len => *c,
            other => {
                return Err(Error::Shape(format!(
                    "layout expects [{}, {}, C] sequences, got {other:?}",
                    self.seqs, self.len
                )))
            }
        };
        let mut out = vec![T::zero(); self.rows() * c];
        for i in range.start * self.len..range.end * self.len {
            let r = self.index[i];
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(&seqs.data()[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        Tensor::new([self.rows(), c], out)
    }

    fn check_rows<T: Element>(&self, rows: &Tensor<T>) -> Result<usize> {
        match rows.shape() {
            [r, c] if *r == self.rows() => Ok(*c),
            other => Err(Error::Shape(format!(
                "layout expects [{}, C] canonical rows, got {other:?}",
                self.rows()
            ))),
        }
    }
}

fn check_extents(extents: &[Extent], frames: usize) -> Result<()> {
    if extents.is_empty() {
        return Err(Error::Shape("empty scale set".into()));
    }
    if frames == 0 || extents.iter().any(|e| e.area() == 0) {
        return Err(Error::Shape(format!(
            "degenerate extents {extents:?} with {frames} frames"
        )));
    }
    Ok(())
}

/// Start row of each scale, plus the total visual row count as last entry.
fn scale_offsets(extents: &[Extent], frames: usize) -> Vec<usize> {
    let mut off = vec![0];
    for e in extents {
        off.push(off.last().unwrap() + frames * e.area());
    }
    off
}

fn push_order(
    out: &mut Vec<usize>,
    order: Order,
    t: usize,
    h: usize,
    w: usize,
    f: impl Fn(usize, usize, usize) -> usize,
) {
    let dims = [t, h, w];
    let [a0, a1, a2] = order.axes();
    let mut idx = [0usize; 3];
    for i in 0..dims[a0] {
        idx[a0] = i;
        for j in 0..dims[a1] {
            idx[a1] = j;
            for k in 0..dims[a2] {
                idx[a2] = k;
                out.push(f(idx[0], idx[1], idx[2]));
            }
        }
    }
}

/// Stacks per-scale maps `[T, h_i, w_i, C]` into canonical rows.
pub fn pyramid_rows<T: Element>(scales: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<Extent>, usize)> {
    let (frames, c) = match scales.first().map(|s| s.shape()) {
        Some([t, _, _, c]) => (*t, *c),
        Some(s) => return Err(Error::Shape(format!("scale map {s:?}, expected [T, h, w, C]"))),
        None => return Err(Error::Shape("empty scale set".into())),
    };
    let mut data = Vec::new();
    let mut extents = Vec::new();
    for s in scales {
        match s.shape() {
            [t, h, w, cc] if *t == frames && *cc == c => extents.push(Extent::new(*h, *w)),
            other => return Err(Error::Shape(format!("scale map {other:?} with T={frames}, C={c}"))),
        }
        data.extend_from_slice(s.data());
    }
    let rows = data.len() / c.max(1);
    Ok((Tensor::new([rows, c], data)?, extents, frames))
}

/// Inverse of [`pyramid_rows`] for the visual rows of `rows`.
pub fn split_rows<T: Element>(rows: &Tensor<T>, extents: &[Extent], frames: usize) -> Result<Vec<Tensor<T>>> {
    let c = rows.last_dim();
    let mut out = Vec::with_capacity(extents.len());
    let mut off = 0;
    for e in extents {
        let n = frames * e.area() * c;
        let chunk = rows
            .data()
            .get(off..off + n)
            .ok_or_else(|| Error::Shape("not enough rows for extents".into()))?;
        out.push(Tensor::new([frames, e.h, e.w, c], chunk.to_vec())?);
        off += n;
    }
    Ok(out)
}

/// Four planar sequences per frame over the cross-scale concatenation.
pub fn flatten_ss2d<T: Element>(scales: &[Tensor<T>]) -> Result<(ScanLayout, Tensor<T>)> {
    let (rows, extents, frames) = pyramid_rows(scales)?;
    let layout = ScanLayout::per_frame(&extents, frames, AudioAttach::None)?;
    let seqs = layout.flatten(&rows)?;
    Ok((layout, seqs))
}

/// `count` spatio-temporal sequences over the cross-scale concatenation.
pub fn flatten_3d<T: Element>(scales: &[Tensor<T>], count: usize) -> Result<(ScanLayout, Tensor<T>)> {
    let (rows, extents, frames) = pyramid_rows(scales)?;
    let layout = ScanLayout::spatiotemporal(&extents, frames, &direction_set(count)?, AudioAttach::None)?;
    let seqs = layout.flatten(&rows)?;
    Ok((layout, seqs))
}

/// Sums the un-permuted outputs of all sequences and splits them per scale.
pub fn merge_directions<T: Element>(layout: &ScanLayout, outputs: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let rows = layout.merge(outputs)?;
    split_rows(&rows, layout.extents(), layout.frames())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionLevel {
    Frame,
    Temporal,
}

/// Serializes one visual scale `[T, h, w, C]` together with audio `[T, C]`.
///
/// Frame level uses the four planar directions per frame; temporal level the
/// four `THW±`/`TWH±` directions over the whole clip.
pub fn attach_audio<T: Element>(
    visual: &Tensor<T>,
    audio: &Tensor<T>,
    attach: AudioAttach,
    level: FusionLevel,
) -> Result<(ScanLayout, Tensor<T>)> {
    let (vrows, extents, frames) = pyramid_rows(std::slice::from_ref(visual))?;
    if audio.shape() != [frames, vrows.last_dim()] {
        return Err(Error::Shape(format!(
            "audio {:?} does not match {frames} frames of width {}",
            audio.shape(),
            vrows.last_dim()
        )));
    }
    if attach == AudioAttach::None {
        return Err(Error::Invalid("attach_audio needs append or prepend".into()));
    }
    let layout = match level {
        FusionLevel::Frame => ScanLayout::per_frame(&extents, frames, attach)?,
        FusionLevel::Temporal => ScanLayout::spatiotemporal(&extents, frames, &cross_modal_set(), attach)?,
    };
    let mut data = vrows.into_data();
    data.extend_from_slice(audio.data());
    let rows = Tensor::new([layout.rows(), audio.last_dim()], data)?;
    let seqs = layout.flatten(&rows)?;
    Ok((layout, seqs))
}

/// Direction-summed audio outputs `[T, C]` and visual outputs `[T, h, w, C]`.
pub fn partition_audio<T: Element>(layout: &ScanLayout, scanned: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if layout.attach() == AudioAttach::None {
        return Err(Error::Invalid("layout has no audio slots".into()));
    }
    let rows = layout.merge(scanned)?;
    let c = rows.last_dim();
    let v = layout.visual_rows();
    let audio = Tensor::new([layout.frames(), c], rows.data()[v * c..].to_vec())?;
    let mut visual = split_rows(&rows, layout.extents(), layout.frames())?;
    Ok((audio, visual.remove(0)))
}
