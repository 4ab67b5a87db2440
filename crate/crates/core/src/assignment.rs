//! Mutual-supervision sample assignment.
//!
//! For every ground-truth object the assignment
//!
//! 1. collects the anchors whose center lies inside the object and for which
//!    the object is the highest-IoU match ([`match_gt`]);
//! 2. filters them into an adaptive candidate bag using the joint likelihood
//!    `P = p * IoU^theta` and the threshold `b * max P` ([`build_candidate_bags`]);
//! 3. ranks the bag twice, once per head, with the mutual criteria
//!    `v_cls = q * p^alpha` and `v_reg = p * q^alpha` ([`mutual_criteria`]);
//! 4. turns ranks into loss weights `exp(-R / tau)` with `tau_cls = sqrt(|bag|)`
//!    and `tau_reg = 0.5 * tau_cls` ([`rank_to_weights`]).
//!
//! Everything here works on a frozen [`PredictionSnapshot`]; the weights are
//! constants from the point of view of the losses.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{iou, BBox, Object, Point};

/// Hyper-parameters of the assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    /// Exponent rescaling IoU into `q = IoU^theta`.
    pub theta: f64,
    /// Bag threshold coefficient `b`.
    pub bag_threshold: f64,
    /// Self-regularization exponent of the mutual criteria.
    pub alpha: f64,
    /// `tau_reg / tau_cls`.
    pub reg_tau_ratio: f64,
    /// Use indicator weights `1[R < tau]` instead of `exp(-R / tau)`.
    pub hard_targets: bool,
    /// Fixed `tau_cls` for every object; disables the bag-size temperature.
    pub fixed_tau: Option<f64>,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            theta: 4.0,
            bag_threshold: 0.1,
            alpha: 1.0 / 3.0,
            reg_tau_ratio: 0.5,
            hard_targets: false,
            fixed_tau: None,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return bad(format!("assign.theta must be >= 1, got {}", self.theta));
        }
        if !(self.bag_threshold > 0.0 && self.bag_threshold < 1.0) {
            return bad(format!(
                "assign.bag_threshold must be in (0, 1), got {}",
                self.bag_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!(
                "assign.alpha must be in [0, 1], got {}",
                self.alpha
            ));
        }
        if !(self.reg_tau_ratio > 0.0 && self.reg_tau_ratio.is_finite()) {
            return bad(format!(
                "assign.reg_tau_ratio must be > 0, got {}",
                self.reg_tau_ratio
            ));
        }
        if let Some(tau) = self.fixed_tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("assign.fixed_tau must be > 0, got {tau}"));
            }
        }
        Ok(())
    }

    /// Temperatures `(tau_cls, tau_reg)` for a bag of `bag_size` members.
    pub fn temperatures(&self, bag_size: usize) -> (f64, f64) {
        let tau_cls = self.fixed_tau.unwrap_or_else(|| (bag_size as f64).sqrt());
        (tau_cls, self.reg_tau_ratio * tau_cls)
    }
}

/// Frozen per-anchor predictions: category probabilities and decoded boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSnapshot {
    num_categories: usize,
    /// Row-major `[num_anchors x num_categories]`.
    probs: Vec<f64>,
    boxes: Vec<BBox>,
}

impl PredictionSnapshot {
    pub fn new(num_categories: usize, probs: Vec<f64>, boxes: Vec<BBox>) -> Result<Self> {
        ensure!(num_categories > 0, "snapshot needs at least one category");
        if probs.len() != boxes.len() * num_categories {
            return Err(Error::ShapeMismatch {
                what: "snapshot probabilities",
                expected: boxes.len() * num_categories,
                got: probs.len(),
            });
        }
        ensure!(
            probs.iter().all(|p| (0.0..=1.0).contains(p)),
            "snapshot probabilities must lie in [0, 1]"
        );
        ensure!(
            boxes.iter().all(BBox::is_valid),
            "snapshot boxes must be finite with x1 <= x2 and y1 <= y2"
        );
        Ok(Self {
            num_categories,
            probs,
            boxes,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn prob(&self, anchor: usize, category: usize) -> f64 {
        self.probs[anchor * self.num_categories + category]
    }

    pub fn probs_row(&self, anchor: usize) -> &[f64] {
        let k = self.num_categories;
        &self.probs[anchor * k..(anchor + 1) * k]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    /// Multiplies every probability by `c`. Used by invariance checks.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.num_categories,
            self.probs.iter().map(|p| p * c).collect(),
            self.boxes.clone(),
        )
    }
}

/// The adaptive set of anchors allowed to supervise one object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateBag {
    pub object: usize,
    /// Anchor indices in ascending order.
    pub members: Vec<usize>,
    /// `b * max P` over the matched anchors.
    pub threshold: f64,
    /// `P_i` per member.
    pub joint_likelihoods: Vec<f64>,
    /// `p_i` per member (probability of the object's category).
    pub probs: Vec<f64>,
    /// Raw IoU per member.
    pub ious: Vec<f64>,
    /// Number of anchors matched to this object before thresholding.
    pub num_matched: usize,
    /// Every matched anchor had `P = 0`; members are all matched anchors and
    /// ranking falls back to raw IoU.
    pub fallback: bool,
}

impl CandidateBag {
    /// An object with no matched anchor cannot be supervised.
    pub fn is_ignored(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Matches each anchor to at most one object.
///
/// An anchor is eligible for object `j` only if its center is strictly inside
/// `gt[j].bbox`. Among eligible objects the one with the highest IoU against
/// the anchor's predicted box wins; ties go to the smaller object, then the
/// lower index.
pub fn match_gt(centers: &[Point], predicted: &[BBox], gt: &[Object]) -> Vec<Option<usize>> {
    centers
        .iter()
        .zip(predicted)
        .map(|(center, pred)| {
            let mut best: Option<(usize, f64, f64)> = None;
            for (j, obj) in gt.iter().enumerate() {
                if !obj.bbox.contains_strict(*center) {
                    continue;
                }
                let overlap = iou(pred, &obj.bbox);
                let area = obj.bbox.area();
                let better = match best {
                    None => true,
                    Some((_, best_iou, best_area)) => {
                        overlap > best_iou || (overlap == best_iou && area < best_area)
                    }
                };
                if better {
                    best = Some((j, overlap, area));
                }
            }
            best.map(|(j, _, _)| j)
        })
        .collect()
}

/// Builds one candidate bag per object (empty for objects with no match).
pub fn build_candidate_bags(
    snapshot: &PredictionSnapshot,
    matches: &[Option<usize>],
    gt: &[Object],
    cfg: &AssignConfig,
) -> Vec<CandidateBag> {
    let mut matched: Vec<Vec<usize>> = vec![Vec::new(); gt.len()];
    for (anchor, m) in matches.iter().enumerate() {
        if let Some(j) = *m {
            matched[j].push(anchor);
        }
    }

    gt.iter()
        .zip(matched)
        .enumerate()
        .map(|(j, (obj, anchors))| {
            let probs: Vec<f64> = anchors
                .iter()
                .map(|&i| snapshot.prob(i, obj.category))
                .collect();
            let ious: Vec<f64> = anchors
                .iter()
                .map(|&i| iou(&snapshot.boxes()[i], &obj.bbox))
                .collect();
            let joint: Vec<f64> = probs
                .iter()
                .zip(&ious)
                .map(|(p, o)| p * o.powf(cfg.theta))
                .collect();
            let max_joint = joint.iter().copied().fold(0.0, f64::max);
            let threshold = cfg.bag_threshold * max_joint;
            let fallback = max_joint <= 0.0 && !anchors.is_empty();

            let keep: Vec<usize> = (0..anchors.len())
                .filter(|&k| fallback || joint[k] >= threshold)
                .collect();
            CandidateBag {
                object: j,
                members: keep.iter().map(|&k| anchors[k]).collect(),
                threshold,
                joint_likelihoods: keep.iter().map(|&k| joint[k]).collect(),
                probs: keep.iter().map(|&k| probs[k]).collect(),
                ious: keep.iter().map(|&k| ious[k]).collect(),
                num_matched: anchors.len(),
                fallback,
            }
        })
        .collect()
}

/// Per-head ranking criteria `(v_cls, v_reg) = (q * p^alpha, p * q^alpha)`.
pub fn mutual_criteria(p: f64, q: f64, alpha: f64) -> (f64, f64) {
    (q * p.powf(alpha), p * q.powf(alpha))
}

/// Ranks `values` in descending order (ties by position) and maps rank `R`
/// to `exp(-R / tau)`, or to `1[R < tau]` when `hard` is set.
pub fn rank_to_weights(values: &[f64], tau: f64, hard: bool) -> (Vec<usize>, Vec<f64>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0; values.len()];
    for (rank, &pos) in order.iter().enumerate() {
        ranks[pos] = rank;
    }
    let weights = ranks.iter().map(|&r| rank_weight(r, tau, hard)).collect();
    (ranks, weights)
}

pub fn rank_weight(rank: usize, tau: f64, hard: bool) -> f64 {
    let r = rank as f64;
    if hard {
        if r < tau {
            1.0
        } else {
            0.0
        }
    } else {
        (-r / tau).exp()
    }
}

/// Assignment result for a single anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorAssignment {
    pub object: Option<usize>,
    pub category: Option<usize>,
    pub rank_cls: Option<usize>,
    pub rank_reg: Option<usize>,
    pub w_cls: f64,
    pub w_reg: f64,
}

impl AnchorAssignment {
    const BACKGROUND: Self = Self {
        object: None,
        category: None,
        rank_cls: None,
        rank_reg: None,
        w_cls: 0.0,
        w_reg: 0.0,
    };
}

/// Per-object view: the bag plus criteria, ranks and weights of its members.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectAssignment {
    pub bag: CandidateBag,
    pub tau_cls: f64,
    pub tau_reg: f64,
    /// `q = IoU^theta` per member.
    pub q: Vec<f64>,
    pub v_cls: Vec<f64>,
    pub v_reg: Vec<f64>,
    pub rank_cls: Vec<usize>,
    pub rank_reg: Vec<usize>,
    pub w_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
}

impl ObjectAssignment {
    /// Bag member carrying the largest classification weight (rank 0).
    pub fn top_cls_anchor(&self) -> Option<usize> {
        self.rank_cls
            .iter()
            .position(|&r| r == 0)
            .map(|k| self.bag.members[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentOutput {
    pub anchors: Vec<AnchorAssignment>,
    pub objects: Vec<ObjectAssignment>,
}

/// One bag member, flattened for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugRecord {
    pub object: usize,
    pub anchor: usize,
    pub p: f64,
    pub q: f64,
    #[serde(rename = "P")]
    pub joint: f64,
    pub v_cls: f64,
    pub v_reg: f64,
    #[serde(rename = "R_cls")]
    pub rank_cls: usize,
    #[serde(rename = "R_reg")]
    pub rank_reg: usize,
    pub w_cls: f64,
    pub w_reg: f64,
}

impl AssignmentOutput {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn debug_records(&self) -> Vec<DebugRecord> {
        let mut out = Vec::new();
        for o in &self.objects {
            for (k, &anchor) in o.bag.members.iter().enumerate() {
                out.push(DebugRecord {
                    object: o.bag.object,
                    anchor,
                    p: o.bag.probs[k],
                    q: o.q[k],
                    joint: o.bag.joint_likelihoods[k],
                    v_cls: o.v_cls[k],
                    v_reg: o.v_reg[k],
                    rank_cls: o.rank_cls[k],
                    rank_reg: o.rank_reg[k],
                    w_cls: o.w_cls[k],
                    w_reg: o.w_reg[k],
                });
            }
        }
        out
    }

    pub fn sum_w_cls(&self) -> f64 {
        self.anchors.iter().map(|a| a.w_cls).sum()
    }

    pub fn sum_w_reg(&self) -> f64 {
        self.anchors.iter().map(|a| a.w_reg).sum()
    }
}

/// Runs the full assignment for one image.
///
/// `centers[i]` is the center of anchor `i`; it must line up with the
/// snapshot's anchors. Anchors outside every bag are background with zero
/// weight for both heads.
pub fn musu_assign(
    snapshot: &PredictionSnapshot,
    gt: &[Object],
    centers: &[Point],
    cfg: &AssignConfig,
) -> Result<AssignmentOutput> {
    cfg.validate()?;
    if centers.len() != snapshot.num_anchors() {
        return Err(Error::ShapeMismatch {
            what: "anchor centers",
            expected: snapshot.num_anchors(),
            got: centers.len(),
        });
    }
    for obj in gt {
        ensure!(
            obj.category < snapshot.num_categories(),
            "object category {} out of range for {} categories",
            obj.category,
            snapshot.num_categories()
        );
        ensure!(
            obj.bbox.is_valid(),
            "invalid ground-truth box {:?}",
            obj.bbox
        );
    }

    let matches = match_gt(centers, snapshot.boxes(), gt);
    let bags = build_candidate_bags(snapshot, &matches, gt, cfg);

    let mut anchors = vec![AnchorAssignment::BACKGROUND; snapshot.num_anchors()];
    let mut objects = Vec::with_capacity(bags.len());
    for bag in bags {
        let (tau_cls, tau_reg) = cfg.temperatures(bag.len());
        let q: Vec<f64> = bag.ious.iter().map(|o| o.powf(cfg.theta)).collect();
        let (v_cls, v_reg): (Vec<f64>, Vec<f64>) = bag
            .probs
            .iter()
            .zip(&q)
            .map(|(&p, &q)| mutual_criteria(p, q, cfg.alpha))
            .unzip();

        let (cls_key, reg_key) = if bag.fallback {
            (&bag.ious, &bag.ious)
        } else {
            (&v_cls, &v_reg)
        };
        let (rank_cls, w_cls) = rank_to_weights(cls_key, tau_cls, cfg.hard_targets);
        let (rank_reg, w_reg) = rank_to_weights(reg_key, tau_reg, cfg.hard_targets);

        let category = gt[bag.object].category;
        for (k, &anchor) in bag.members.iter().enumerate() {
            anchors[anchor] = AnchorAssignment {
                object: Some(bag.object),
                category: Some(category),
                rank_cls: Some(rank_cls[k]),
                rank_reg: Some(rank_reg[k]),
                w_cls: w_cls[k],
                w_reg: w_reg[k],
            };
        }
        objects.push(ObjectAssignment {
            bag,
            tau_cls,
            tau_reg,
            q,
            v_cls,
            v_reg,
            rank_cls,
            rank_reg,
            w_cls,
            w_reg,
        });
    }
    Ok(AssignmentOutput { anchors, objects })
}
