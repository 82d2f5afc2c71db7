use serde::{Deserialize, Serialize};

use crate::autodiff::resize_bilinear;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Weight `β²` of recall in the F-measure.
    pub beta_sq: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { beta_sq: 1.0 }
    }
}

/// Additive evaluation statistics over valid frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counts {
    pub iou_sum: f64,
    pub frames: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Valid frames with an empty target.
    pub silent_frames: usize,
    /// Silent frames whose prediction is empty as well.
    pub silent_empty: usize,
}

impl Counts {
    pub fn merge(&mut self, o: &Counts) {
        self.iou_sum += o.iou_sum;
        self.frames += o.frames;
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.silent_frames += o.silent_frames;
        self.silent_empty += o.silent_empty;
    }

    pub fn metrics(&self, opts: MetricOptions) -> Metrics {
        let tp = self.tp as f64;
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            tp / (tp + self.fp as f64)
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            tp / (tp + self.fn_ as f64)
        };
        let denom = opts.beta_sq * precision + recall;
        Metrics {
            m_j: if self.frames == 0 {
                0.0
            } else {
                self.iou_sum / self.frames as f64
            },
            m_f: if denom == 0.0 {
                0.0
            } else {
                (1.0 + opts.beta_sq) * precision * recall / denom
            },
            frames: self.frames,
            silent_frames: self.silent_frames,
            silent_empty_rate: if self.silent_frames == 0 {
                None
            } else {
                Some(self.silent_empty as f64 / self.silent_frames as f64)
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "M_J")]
    pub m_j: f64,
    #[serde(rename = "M_F")]
    pub m_f: f64,
    pub frames: usize,
    #[serde(skip)]
    pub silent_frames: usize,
    #[serde(skip)]
    pub silent_empty_rate: Option<f64>,
}

/// IoU of two binary masks; two empty masks score 1.
pub fn frame_iou(pred: &[bool], target: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Bilinear ×`factor` upsampling of `[T, h, w, K]` logits.
pub fn upsample_logits<T: Element>(logits: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    match *logits.shape() {
        [_, h, w, _] => resize_bilinear(logits, h * factor, w * factor),
        ref s => Err(Error::Shape(format!("logits {s:?}, expected [T, h, w, K]"))),
    }
}

fn check<T: Element>(logits: &Tensor<T>, masks: &Tensor<T>, valid: &[f64]) -> Result<(usize, usize, usize)> {
    match (logits.shape(), masks.shape()) {
        ([t, h, w, k], [mt, mh, mw]) if t == mt && h == mh && w == mw && *t == valid.len() => Ok((*t, h * w, *k)),
        (l, m) => Err(Error::Shape(format!(
            "logits {l:?} vs masks {m:?} with {} frames",
            valid.len()
        ))),
    }
}

/// Statistics of single-channel full-resolution logits against class-id
/// masks (any nonzero id is foreground). Prediction threshold: probability 0.5.
pub fn binary_metrics<T: Element>(logits: &Tensor<T>, masks: &Tensor<T>, valid: &[f64]) -> Result<Counts> {
    let (frames, per, k) = check(logits, masks, valid)?;
    if k != 1 {
        return Err(Error::Shape(format!("binary metrics need one channel, got {k}")));
    }
    let mut c = Counts::default();
    for f in (0..frames).filter(|&f| valid[f] > 0.0) {
        let pred: Vec<bool> = logits.data()[f * per..(f + 1) * per]
            .iter()
            .map(|&v| v > T::zero())
            .collect();
        let target: Vec<bool> = masks.data()[f * per..(f + 1) * per]
            .iter()
            .map(|&v| v != T::zero())
            .collect();
        tally(&mut c, &pred, &target, |p, t| (p && t, p && !t, !p && t));
    }
    Ok(c)
}

/// Statistics for `K`-channel logits: each pixel is assigned the class with
/// the largest logit if its probability exceeds 0.5, else background.
pub fn semantic_metrics<T: Element>(logits: &Tensor<T>, masks: &Tensor<T>, valid: &[f64]) -> Result<Counts> {
    let (frames, per, k) = check(logits, masks, valid)?;
    let mut c = Counts::default();
    for f in (0..frames).filter(|&f| valid[f] > 0.0) {
        let pred: Vec<usize> = (0..per)
            .map(|p| {
                let row = &logits.data()[(f * per + p) * k..(f * per + p + 1) * k];
                let (best, v) =
                    row.iter().enumerate().fold(
                        (0, T::neg_infinity()),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
                if v > T::zero() {
                    best + 1
                } else {
                    0
                }
            })
            .collect();
        let target: Vec<usize> = masks.data()[f * per..(f + 1) * per]
            .iter()
            .map(|v| v.as_f64() as usize)
            .collect();
        let present: Vec<usize> = (1..=k).filter(|cl| pred.contains(cl) || target.contains(cl)).collect();
        let iou = if present.is_empty() {
            1.0
        } else {
            present
                .iter()
                .map(|&cl| {
                    let p: Vec<bool> = pred.iter().map(|&v| v == cl).collect();
                    let t: Vec<bool> = target.iter().map(|&v| v == cl).collect();
                    frame_iou(&p, &t)
                })
                .sum::<f64>()
                / present.len() as f64
        };
        c.iou_sum += iou;
        c.frames += 1;
        for (&p, &t) in pred.iter().zip(&target) {
            c.tp += (p != 0 && p == t) as u64;
            c.fp += (p != 0 && p != t) as u64;
            c.fn_ += (t != 0 && p != t) as u64;
        }
        if target.iter().all(|&t| t == 0) {
            c.silent_frames += 1;
            c.silent_empty += pred.iter().all(|&p| p == 0) as usize;
        }
    }
    Ok(c)
}

fn tally(c: &mut Counts, pred: &[bool], target: &[bool], f: impl Fn(bool, bool) -> (bool, bool, bool)) {
    c.iou_sum += frame_iou(pred, target);
    c.frames += 1;
    for (&p, &t) in pred.iter().zip(target) {
        let (tp, fp, fn_) = f(p, t);
        c.tp += tp as u64;
        c.fp += fp as u64;
        c.fn_ += fn_ as u64;
    }
    if target.iter().all(|&t| !t) {
        c.silent_frames += 1;
        c.silent_empty += pred.iter().all(|&p| !p) as usize;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(pred: &[f64], target: &[f64]) -> Metrics {
        let n = pred.len();
        let logits = Tensor::<f64>::from_f64(
            [1, 1, n, 1],
            &pred
                .iter()
                .map(|&p| if p > 0.0 { 5.0 } else { -5.0 })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let masks = Tensor::from_f64([1, 1, n], target).unwrap();
        binary_metrics(&logits, &masks, &[1.0])
            .unwrap()
            .metrics(MetricOptions::default())
    }

    #[test]
    fn identical_and_disjoint() {
        let m = eval(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!((m.m_j, m.m_f), (1.0, 1.0));
        let m = eval(&[1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!((m.m_j, m.m_f), (0.0, 0.0));
    }

    #[test]
    fn half_coverage() {
        let m = eval(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.m_j, 0.5);
        assert!((m.m_f - 2.0 / 3.0).abs() < 1e-15);
        let c = Counts {
            tp: 1,
            fn_: 1,
            ..Default::default()
        };
        // β² = 0.3: 1.3 · 1 · 0.5 / (0.3 + 0.5)
        assert!((c.metrics(MetricOptions { beta_sq: 0.3 }).m_f - 0.8125).abs() < 1e-15);
    }

    #[test]
    fn empty_frames_score_one() {
        let m = eval(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(m.m_j, 1.0);
        assert_eq!(m.silent_empty_rate, Some(1.0));
        let m = eval(&[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(m.m_j, 0.0);
        assert_eq!(m.silent_empty_rate, Some(0.0));
    }

    #[test]
    fn padded_frames_are_skipped() {
        let logits = Tensor::<f64>::from_f64([2, 1, 1, 1], &[5.0, 5.0]).unwrap();
        let masks = Tensor::from_f64([2, 1, 1], &[1.0, 0.0]).unwrap();
        let c = binary_metrics(&logits, &masks, &[1.0, 0.0]).unwrap();
        assert_eq!(c.frames, 1);
        assert_eq!(c.metrics(MetricOptions::default()).m_j, 1.0);
    }

    #[test]
    fn semantic_assigns_argmax_class() {
        let logits = Tensor::<f64>::from_f64([1, 1, 2, 2], &[3.0, 1.0, -2.0, -1.0]).unwrap();
        let masks = Tensor::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap();
        let m = semantic_metrics(&logits, &masks, &[1.0])
            .unwrap()
            .metrics(MetricOptions::default());
        assert_eq!((m.m_j, m.m_f), (1.0, 1.0));
    }
}
