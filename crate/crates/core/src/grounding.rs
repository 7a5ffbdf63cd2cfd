//! Box geometry, the matching-score head, the IoU-supervised loss, and the
//! IoU@0.5 metric.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};
use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized [0, 1] coordinates. Serializes as the
/// 4-element array [x1, y1, x2, y2]; deserialization validates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for Box2D {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        Box2D::from_array(a)
    }
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Box2D { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinates {self:?}")));
        }
        if coords.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidBox(format!(
                "coordinates outside [0, 1]: {self:?}"
            )));
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::InvalidBox(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Box2D::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection-over-union of two valid boxes; 0 when disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Fraction of pairs with IoU strictly greater than 0.5. The empty case is
/// defined as 0.0 (and flagged so callers can warn).
pub fn iou05_accuracy(predicted: &[Box2D], truth: &[Box2D]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidShape(format!(
            "{} predictions vs {} ground-truth boxes",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        if iou(p, t)? > 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / predicted.len() as f64)
}

/// Linear scoring head: logit_i = W_s . fused_i + b_s.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead {
    /// [d, 1]
    pub w: Tensor,
    /// [1, 1]
    pub b: Tensor,
}

impl ScoreHead {
    pub fn new(w: Tensor, b: Tensor) -> Result<Self> {
        let (_, c) = w.dims2()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!(
                "score weight must be a column vector, got {:?}",
                w.shape()
            )));
        }
        if b.dims2()? != (1, 1) {
            return Err(Error::InvalidShape(format!(
                "score bias must be [1, 1], got {:?}",
                b.shape()
            )));
        }
        Ok(ScoreHead { w, b })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchScores {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl MatchScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits.iter().map(|&x| sigmoid(x)).collect();
        MatchScores { logits, probs }
    }
}

/// Scores fused region representations ([n, d]) with the linear head.
pub fn score_regions(fused: &Tensor, head: &ScoreHead) -> Result<MatchScores> {
    let (_, d) = fused.dims2()?;
    let (wd, _) = head.w.dims2()?;
    if wd != d {
        return Err(Error::InvalidShape(format!(
            "head width {wd} vs fused width {d}"
        )));
    }
    let raw = fused.matmul(&head.w)?;
    let b = head.b.data()[0];
    let logits: Vec<f64> = raw.data().iter().map(|&v| v + b).collect();
    Ok(MatchScores::from_logits(logits))
}

/// Mean BCE over regions against raw-IoU targets, in logit form.
pub fn bce_loss(scores: &MatchScores, targets: &[f64]) -> Result<f64> {
    if scores.logits.len() != targets.len() {
        return Err(Error::InvalidShape(format!(
            "{} scores vs {} targets",
            scores.logits.len(),
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidShape(format!("target {t} outside [0, 1]")));
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for (&x, &t) in scores.logits.iter().zip(targets) {
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    Ok(loss / n)
}

/// Argmax over probabilities; ties break to the lowest index.
pub fn predict_region(scores: &MatchScores) -> Result<usize> {
    if scores.probs.is_empty() {
        return Err(Error::InvalidShape("no regions to score".into()));
    }
    let mut best = 0;
    for (i, &p) in scores.probs.iter().enumerate() {
        if p > scores.probs[best] {
            best = i;
        }
    }
    Ok(best)
}
