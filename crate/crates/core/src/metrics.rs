//! Mask selection at inference, mean IoU and F-measure.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AutrModel, Prediction};
use crate::numeric::{sigmoid, Graph, Tensor};
use crate::objective::Example;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub beta_sq: f64,
    pub threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta_sq: 0.3,
            threshold: 0.5,
        }
    }
}

fn check_pair(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: prediction {:?} and ground truth {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|` over binary masks; 1 when both are empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("iou", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// F-beta of the thresholded probabilities; 0 when undefined.
pub fn f_score(pred_prob: &Tensor, gt: &Tensor, beta_sq: f64, threshold: f64) -> Result<f64> {
    check_pair("f_score", pred_prob, gt)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
        match (p >= threshold, g > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let den = beta_sq * precision + recall;
    Ok(if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    })
}

/// Per-frame output after picking the most confidently sounding query.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// `[T, H, W]` probabilities at the requested resolution.
    pub mask_prob: Tensor,
    /// `[T]` sounding probability of the chosen query.
    pub sounding_prob: Tensor,
    pub query: Vec<usize>,
}

/// Chooses the highest-scoring query per frame (lowest index on ties),
/// resizes its logits bilinearly to `(h, w)` and applies the sigmoid.
pub fn select_masks(pred: &Prediction, h: usize, w: usize) -> Result<Selection> {
    let ls = pred.logits.shape();
    let ss = pred.scores.shape();
    if ls.len() != 4 || ss != [ls[1], ls[0]] {
        return Err(Error::contract(format!("logits {ls:?} and scores {ss:?} disagree")));
    }
    let (n_q, t, hm, wm) = (ls[0], ls[1], ls[2], ls[3]);
    let mut query = Vec::with_capacity(t);
    let mut chosen = Vec::with_capacity(t * hm * wm);
    let mut sounding = Vec::with_capacity(t);
    for f in 0..t {
        let row = &pred.scores.data()[f * n_q..][..n_q];
        let best = (1..n_q).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        query.push(best);
        sounding.push(sigmoid(row[best]));
        chosen.extend_from_slice(&pred.logits.data()[(best * t + f) * hm * wm..][..hm * wm]);
    }
    let mut g = Graph::no_grad();
    let low = g.constant(Tensor::new(&[t, hm, wm], chosen)?);
    let up = g.bilinear_resize(low, h, w)?;
    let up = g.sigmoid(up);
    Ok(Selection {
        mask_prob: g.value(up).clone(),
        sounding_prob: Tensor::new(&[t], sounding)?,
        query,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub iou: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Mean IoU × 100.
    pub m_j: f64,
    pub m_f: f64,
    pub per_frame: Vec<FrameScore>,
}

impl EvalResult {
    pub fn from_frames(per_frame: Vec<FrameScore>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::contract("no frames to evaluate"));
        }
        let n = per_frame.len() as f64;
        Ok(Self {
            m_j: 100.0 * per_frame.iter().map(|s| s.iou).sum::<f64>() / n,
            m_f: per_frame.iter().map(|s| s.f).sum::<f64>() / n,
            per_frame,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.per_frame.len()
    }

    /// `key=value` lines: `m_j`, `m_f`, `num_frames`.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "m_j={}", self.m_j);
        let _ = writeln!(s, "m_f={}", self.m_f);
        let _ = writeln!(s, "num_frames={}", self.num_frames());
        s
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.report())?;
        Ok(())
    }
}

/// Scores every frame of a selection against the full-resolution masks.
pub fn score_frames(mask_prob: &Tensor, gt: &Tensor, cfg: &MetricConfig) -> Result<Vec<FrameScore>> {
    check_pair("score_frames", mask_prob, gt)?;
    (0..gt.shape()[0])
        .map(|f| {
            let p = mask_prob.index0(f);
            let y = gt.index0(f);
            let bin = Tensor::from_fn(p.shape(), |i| f64::from(u8::from(p.data()[i] >= cfg.threshold)));
            Ok(FrameScore {
                iou: iou(&bin, &y)?,
                f: f_score(&p, &y, cfg.beta_sq, cfg.threshold)?,
            })
        })
        .collect()
}

/// Frame-averaged metrics of `model` over `examples`.
pub fn evaluate(model: &AutrModel, examples: &[Example], cfg: &MetricConfig) -> Result<EvalResult> {
    let mut frames = Vec::new();
    for ex in examples {
        let pred = model.predict(ex.video, ex.audio)?;
        let (h, w) = ex.video.size();
        let sel = select_masks(&pred, h, w)?;
        frames.extend(score_frames(&sel.mask_prob, ex.gt.mask(), cfg)?);
    }
    EvalResult::from_frames(frames)
}
