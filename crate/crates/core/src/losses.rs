//! Weighted focal classification loss, weighted GIoU regression loss and their
//! sum, each returning gradients w.r.t. the detector outputs (probabilities
//! and box corners).
//!
//! Classification follows a three-part split per anchor `i` with assigned
//! category `c` and weight `w = w_cls_i`:
//!
//! ```text
//! w * FL+(p_ic) + (1 - w)^beta * FL-(p_ic) + sum_{k != c} FL-(p_ik)
//! ```
//!
//! Anchors outside every bag take `FL-` on all categories. The total is
//! divided by `N = max(sum_i w_cls_i, 1)`.

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentOutput, PredictionSnapshot};
use crate::error::{Error, Result};
use crate::geometry::{giou_loss, BBox, Object};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub balance: f64,
    /// Decay exponent of the penalty coefficient `(1 - w)^beta`.
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            balance: 0.25,
            beta: 4.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "focal.gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.balance > 0.0 && self.balance < 1.0) {
            return Err(Error::Config(format!(
                "focal.balance must be in (0, 1), got {}",
                self.balance
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "focal.beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Positive focal term `balance * (1-p)^gamma * -ln p` and its derivative.
    pub fn positive(&self, p: f64) -> (f64, f64) {
        let g = self.gamma;
        let a = self.balance;
        let one_m = 1.0 - p;
        let value = a * one_m.powf(g) * -p.ln();
        let d_pow = if g == 0.0 {
            0.0
        } else {
            g * one_m.powf(g - 1.0)
        };
        let deriv = a * (d_pow * p.ln() - one_m.powf(g) / p);
        (value, deriv)
    }

    /// Negative focal term `(1-balance) * p^gamma * -ln(1-p)` and its derivative.
    pub fn negative(&self, p: f64) -> (f64, f64) {
        let g = self.gamma;
        let a = 1.0 - self.balance;
        let one_m = 1.0 - p;
        let value = a * p.powf(g) * -one_m.ln();
        let d_pow = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) };
        let deriv = a * (d_pow * -one_m.ln() + p.powf(g) / one_m);
        (value, deriv)
    }
}

/// Per-image loss values.
///
/// The three classification parts are un-normalized sums; `l_cls` is their
/// total divided by `n_cls`. `l_reg` is already normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls_pos: f64,
    pub l_cls_neg_penalty: f64,
    pub l_cls_background: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub n_cls: f64,
    pub n_reg: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_cls_pos,
            self.l_cls_neg_penalty,
            self.l_cls_background,
            self.l_cls,
            self.l_reg,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub l_cls_pos: f64,
    pub l_cls_neg_penalty: f64,
    pub l_cls_background: f64,
    pub n_cls: f64,
    /// Normalized total.
    pub l_cls: f64,
    /// d l_cls / d p, row-major like the probabilities.
    pub grad: Vec<f64>,
}

/// Focal classification loss under soft assignment weights.
///
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the returned
/// gradient is the derivative evaluated at the clamped value.
pub fn classification_loss(
    probs: &[f64],
    num_categories: usize,
    assignment: &AssignmentOutput,
    params: &FocalParams,
) -> Result<ClassificationLoss> {
    let n = assignment.num_anchors();
    if probs.len() != n * num_categories {
        return Err(Error::ShapeMismatch {
            what: "classification probabilities",
            expected: n * num_categories,
            got: probs.len(),
        });
    }
    if let Some((idx, p)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.is_finite() && (0.0..=1.0).contains(*p)))
    {
        return Err(Error::InvalidInput(format!(
            "probability {p} at flat index {idx} is outside [0, 1]"
        )));
    }

    let mut pos = 0.0;
    let mut penalty = 0.0;
    let mut background = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (i, a) in assignment.anchors.iter().enumerate() {
        for k in 0..num_categories {
            let idx = i * num_categories + k;
            let p = probs[idx].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let (neg, d_neg) = params.negative(p);
            if a.category == Some(k) {
                let w = a.w_cls;
                let (pv, d_pos) = params.positive(p);
                let coef = (1.0 - w).powf(params.beta);
                pos += w * pv;
                penalty += coef * neg;
                grad[idx] = w * d_pos + coef * d_neg;
            } else {
                background += neg;
                grad[idx] = d_neg;
            }
        }
    }

    let n_cls = assignment.sum_w_cls().max(1.0);
    grad.iter_mut().for_each(|g| *g /= n_cls);
    Ok(ClassificationLoss {
        l_cls_pos: pos,
        l_cls_neg_penalty: penalty,
        l_cls_background: background,
        n_cls,
        l_cls: (pos + penalty + background) / n_cls,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionLoss {
    pub l_reg: f64,
    pub n_reg: f64,
    /// d l_reg / d (x1, y1, x2, y2) per anchor.
    pub grad: Vec<[f64; 4]>,
}

/// Weighted GIoU loss `sum_i w_reg_i * l_i / sum_i w_reg_i`.
///
/// With no weighted anchor the loss is 0 and the normalizer is 1.
pub fn regression_loss(
    predicted: &[BBox],
    assignment: &AssignmentOutput,
    gt: &[Object],
) -> Result<RegressionLoss> {
    if predicted.len() != assignment.num_anchors() {
        return Err(Error::ShapeMismatch {
            what: "predicted boxes",
            expected: assignment.num_anchors(),
            got: predicted.len(),
        });
    }
    let total_w = assignment.sum_w_reg();
    let n_reg = if total_w > 0.0 { total_w } else { 1.0 };

    let mut sum = 0.0;
    let mut grad = vec![[0.0; 4]; predicted.len()];
    for (i, a) in assignment.anchors.iter().enumerate() {
        if a.w_reg == 0.0 {
            continue;
        }
        let j = a.object.ok_or_else(|| {
            Error::InvalidInput(format!("anchor {i} has regression weight but no object"))
        })?;
        let target = gt.get(j).ok_or_else(|| {
            Error::InvalidInput(format!("anchor {i} refers to missing object {j}"))
        })?;
        let g = giou_loss(&predicted[i], &target.bbox);
        sum += a.w_reg * g.loss;
        let scale = a.w_reg / n_reg;
        for (dst, src) in grad[i].iter_mut().zip(g.grad) {
            *dst = scale * src;
        }
    }
    Ok(RegressionLoss {
        l_reg: sum / n_reg,
        n_reg,
        grad,
    })
}

/// Gradients of the total loss w.r.t. the detector outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGradients {
    pub probs: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

/// `L_det = L_cls + L_reg` with the assignment weights held constant.
pub fn total_loss(
    snapshot: &PredictionSnapshot,
    assignment: &AssignmentOutput,
    gt: &[Object],
    params: &FocalParams,
) -> Result<(LossBreakdown, OutputGradients)> {
    let cls = classification_loss(
        snapshot.probs(),
        snapshot.num_categories(),
        assignment,
        params,
    )?;
    let reg = regression_loss(snapshot.boxes(), assignment, gt)?;
    let breakdown = LossBreakdown {
        l_cls_pos: cls.l_cls_pos,
        l_cls_neg_penalty: cls.l_cls_neg_penalty,
        l_cls_background: cls.l_cls_background,
        l_cls: cls.l_cls,
        l_reg: reg.l_reg,
        l_total: cls.l_cls + reg.l_reg,
        n_cls: cls.n_cls,
        n_reg: reg.n_reg,
    };
    Ok((
        breakdown,
        OutputGradients {
            probs: cls.grad,
            boxes: reg.grad,
        },
    ))
}
