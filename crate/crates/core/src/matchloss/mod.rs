//! Set-prediction math: boxes, GIoU, L1 and focal losses, the matching cost
//! and the optimal assignment.

mod assign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assign::{assign, Assignment, CostMatrix};

/// Sentinel cost for pairs that must not be matched.
pub const FORBIDDEN: f64 = 1e9;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Box in center/size form, normalized to the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite() {
            Ok(())
        } else {
            Err(Error::DegenerateBox)
        }
    }
}

fn overlap(a: &BoxCxCyWH, b: &BoxCxCyWH) -> (f64, f64, f64) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    (inter, union, enclosing)
}

pub fn iou(a: &BoxCxCyWH, b: &BoxCxCyWH) -> Result<f64> {
    a.check()?;
    b.check()?;
    let (inter, union, _) = overlap(a, b);
    Ok(inter / union)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoxCxCyWH, b: &BoxCxCyWH) -> Result<f64> {
    a.check()?;
    b.check()?;
    let (inter, union, enclosing) = overlap(a, b);
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn l1_box(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalValue {
    pub value: f64,
    /// `p_t` was zero and got floored to [`LOG_FLOOR`].
    pub clamped: bool,
}

/// Multi-class focal loss `-α (1 - p_t)^γ ln p_t` for a probability vector.
pub fn focal_loss(p: &[f64], target: usize, alpha: f64, gamma: f64) -> Result<FocalValue> {
    if target >= p.len() {
        return Err(Error::param(format!("target {target} outside {} classes", p.len())));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::param("class probabilities must form a distribution"));
    }
    let pt = p[target];
    let clamped = pt < LOG_FLOOR;
    let value = -alpha * (1.0 - pt).powf(gamma) * pt.max(LOG_FLOOR).ln();
    Ok(FocalValue { value, clamped })
}

/// Binary focal term of one class logit with probability `p`.
fn binary_focal(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        if p >= 1.0 {
            0.0
        } else {
            -alpha * (1.0 - p).powf(gamma) * p.max(LOG_FLOOR).ln()
        }
    } else if p <= 0.0 {
        0.0
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).max(LOG_FLOOR).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub giou: f64,
    pub bbox: f64,
    pub focal: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl CostWeights {
    /// Weights used to build the matching cost.
    pub fn matcher() -> Self {
        Self {
            giou: 2.0,
            bbox: 2.0,
            focal: 5.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }

    /// Weights used for the training loss.
    pub fn loss() -> Self {
        Self {
            giou: 2.0,
            bbox: 1.0,
            focal: 5.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.giou, self.bbox, self.focal, self.alpha, self.gamma];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) && self.alpha <= 1.0 {
            Ok(())
        } else {
            Err(Error::param("cost weights must be non-negative (alpha at most 1)"))
        }
    }
}

/// A query output: box plus one independent probability per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BoxCxCyWH,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub bbox: BoxCxCyWH,
    pub class_id: usize,
}

/// Classification part of the matching cost for probability `p` of the
/// target class: positive focal term minus negative focal term.
pub fn class_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    binary_focal(p, true, alpha, gamma) - binary_focal(p, false, alpha, gamma)
}

/// `N x M` matching cost between predictions and targets.
pub fn pairwise_cost(preds: &[Prediction], gts: &[Target], w: &CostWeights) -> Result<CostMatrix> {
    w.validate()?;
    let mut cost = CostMatrix::zeros(preds.len(), gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let prob = *p
                .probs
                .get(g.class_id)
                .ok_or_else(|| Error::param(format!("target class {} outside prediction classes", g.class_id)))?;
            let c = w.bbox * l1_box(&p.bbox, &g.bbox)
                + w.giou * (1.0 - giou(&p.bbox, &g.bbox)?)
                + w.focal * class_cost(prob, w.alpha, w.gamma);
            cost.set(i, j, c);
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub total: f64,
    pub bbox: f64,
    pub giou: f64,
    pub focal: f64,
    pub assignment: Assignment,
}

/// Matches with `matcher` weights, then scores with `loss` weights: box
/// terms over matched pairs plus binary focal over every query and class
/// (matched queries target their ground-truth class, the rest background).
pub fn set_loss(preds: &[Prediction], gts: &[Target], matcher: &CostWeights, loss: &CostWeights) -> Result<SetLoss> {
    loss.validate()?;
    let assignment = assign(&pairwise_cost(preds, gts, matcher)?)?;
    let mut target_of = vec![None; preds.len()];
    let (mut bbox, mut giou_term) = (0.0, 0.0);
    for &(i, j) in &assignment.pairs {
        target_of[i] = Some(gts[j].class_id);
        bbox += l1_box(&preds[i].bbox, &gts[j].bbox);
        giou_term += 1.0 - giou(&preds[i].bbox, &gts[j].bbox)?;
    }
    let mut focal = 0.0;
    for (p, t) in preds.iter().zip(&target_of) {
        for (c, &prob) in p.probs.iter().enumerate() {
            focal += binary_focal(prob, *t == Some(c), loss.alpha, loss.gamma);
        }
    }
    let (bbox, giou_term, focal) = (loss.bbox * bbox, loss.giou * giou_term, loss.focal * focal);
    Ok(SetLoss {
        total: bbox + giou_term + focal,
        bbox,
        giou: giou_term,
        focal,
        assignment,
    })
}
