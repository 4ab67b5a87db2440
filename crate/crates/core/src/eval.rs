//! Inference, COCO-style average precision and head-consistency metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{musu_assign, AssignConfig};
use crate::detector::{decode_with_geometry, AnchorLayout, DetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, Detection, Object};
use crate::scenes::Scene;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.6;

/// Number of recall sample points of the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eval.score_threshold", self.score_threshold),
            ("eval.nms_threshold", self.nms_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Decodes one table, keeps each anchor's best category when it clears
/// `score_threshold`, then applies class-wise NMS.
pub fn run_inference(
    params: &DetectorParams,
    layout: &AnchorLayout,
    score_threshold: f64,
    nms_threshold: f64,
) -> Result<Vec<Detection>> {
    let snap = decode_with_geometry(params, &layout.geometry())?.snapshot;
    let mut candidates = Vec::new();
    for (i, bbox) in snap.boxes().iter().enumerate() {
        let row = snap.probs_row(i);
        let (category, score) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, p)| {
                    if p > best.1 {
                        (k, p)
                    } else {
                        best
                    }
                });
        if score >= score_threshold {
            candidates.push(Detection::new(*bbox, category, score));
        }
    }
    Ok(nms(&candidates, nms_threshold, score_threshold))
}

/// Precision/recall curve of one category at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub category: usize,
    pub iou_threshold: f64,
    pub num_gt: usize,
    /// Raw cumulative recall/precision in score order.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Interpolated precision at recall `0, 0.01, ..., 1`.
    pub interpolated: Vec<f64>,
}

impl PrCurve {
    pub fn average_precision(&self) -> f64 {
        self.interpolated.iter().sum::<f64>() / self.interpolated.len() as f64
    }
}

/// One PR curve per category that has at least one ground-truth object.
///
/// Detections of a category are pooled over scenes and visited by
/// descending score (ties keep scene then input order). Each detection is
/// matched to the unmatched same-category ground truth of its scene with the
/// highest IoU, provided that IoU is at least `iou_threshold`.
pub fn pr_curves(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Object>],
    iou_threshold: f64,
) -> Result<Vec<PrCurve>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch {
            what: "detections per scene",
            expected: ground_truth.len(),
            got: detections.len(),
        });
    }
    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for obj in ground_truth.iter().flatten() {
        *num_gt.entry(obj.category).or_default() += 1;
    }
    if num_gt.is_empty() {
        return Err(Error::NoGroundTruth);
    }

    let mut curves = Vec::with_capacity(num_gt.len());
    for (&category, &npos) in &num_gt {
        let mut dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| ds.iter().map(move |d| (s, d)))
            .filter(|(_, d)| d.category == category)
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

        let mut matched: Vec<Vec<bool>> =
            ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut recall = Vec::with_capacity(dets.len());
        let mut precision = Vec::with_capacity(dets.len());
        for (scene, det) in dets {
            let mut best: Option<(usize, f64)> = None;
            for (g, obj) in ground_truth[scene].iter().enumerate() {
                if obj.category != category || matched[scene][g] {
                    continue;
                }
                let overlap = iou(&det.bbox, &obj.bbox);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[scene][g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            recall.push(tp as f64 / npos as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }

        // Precision envelope: max precision at any recall >= r.
        let mut envelope = precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let interpolated = (0..RECALL_POINTS)
            .map(|k| {
                let r = k as f64 / (RECALL_POINTS - 1) as f64;
                let idx = recall.partition_point(|&x| x < r);
                envelope.get(idx).copied().unwrap_or(0.0)
            })
            .collect();
        curves.push(PrCurve {
            category,
            iou_threshold,
            num_gt: npos,
            recall,
            precision,
            interpolated,
        });
    }
    Ok(curves)
}

/// 101-point interpolated AP, averaged over categories present in the
/// ground truth. Errors when there is no ground truth at all.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Object>],
    iou_threshold: f64,
) -> Result<f64> {
    let curves = pr_curves(detections, ground_truth, iou_threshold)?;
    Ok(curves.iter().map(PrCurve::average_precision).sum::<f64>() / curves.len() as f64)
}

/// Agreement between the classification and regression heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMetrics {
    /// Fraction of objects whose best-scoring in-box anchor is also the
    /// in-box anchor with the best-localized box.
    pub agreement_rate: f64,
    /// Correlation of `(p, IoU)` over pooled bag members; `None` when fewer
    /// than two pooled samples or zero variance.
    pub pearson: Option<f64>,
    pub num_objects: usize,
    pub num_pooled: usize,
}

/// Index of the first maximum.
fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// True when the maximum score and the maximum IoU sit on the same anchor
/// (first index wins ties).
pub fn object_agreement(scores: &[f64], ious: &[f64]) -> bool {
    argmax(scores).is_some() && argmax(scores) == argmax(ious)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Consistency metrics of per-scene tables over their scenes.
///
/// Objects containing no anchor center are skipped. Bags with fewer than two
/// members do not contribute to the correlation.
pub fn consistency_metrics(
    params: &[DetectorParams],
    layout: &AnchorLayout,
    scenes: &[Scene],
    assign: &AssignConfig,
) -> Result<ConsistencyMetrics> {
    if params.len() != scenes.len() {
        return Err(Error::ShapeMismatch {
            what: "parameter tables",
            expected: scenes.len(),
            got: params.len(),
        });
    }
    let geometry = layout.geometry();
    let centers = layout.centers();
    let mut agree = 0usize;
    let mut objects = 0usize;
    let mut pooled_p = Vec::new();
    let mut pooled_iou = Vec::new();
    for (table, scene) in params.iter().zip(scenes) {
        let snap = decode_with_geometry(table, &geometry)?.snapshot;
        for obj in &scene.objects {
            let inside: Vec<usize> = (0..centers.len())
                .filter(|&i| obj.bbox.contains_strict(centers[i]))
                .collect();
            if inside.is_empty() {
                continue;
            }
            let scores: Vec<f64> = inside.iter().map(|&i| snap.prob(i, obj.category)).collect();
            let ious: Vec<f64> = inside
                .iter()
                .map(|&i| iou(&snap.boxes()[i], &obj.bbox))
                .collect();
            objects += 1;
            if object_agreement(&scores, &ious) {
                agree += 1;
            }
        }
        let assignment = musu_assign(&snap, &scene.objects, &centers, assign)?;
        for o in &assignment.objects {
            if o.bag.len() >= 2 {
                pooled_p.extend_from_slice(&o.bag.probs);
                pooled_iou.extend_from_slice(&o.bag.ious);
            }
        }
    }
    if objects == 0 {
        return Err(Error::InvalidInput(
            "no object contains an anchor center".into(),
        ));
    }
    Ok(ConsistencyMetrics {
        agreement_rate: agree as f64 / objects as f64,
        pearson: pearson(&pooled_p, &pooled_iou),
        num_objects: objects,
        num_pooled: pooled_p.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP keyed by IoU threshold formatted with two decimals.
    pub ap_per_iou: BTreeMap<String, f64>,
    pub ap_coco: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub num_detections: usize,
    pub consistency: ConsistencyMetrics,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Inference on every scene with its own table, followed by AP at the COCO
/// thresholds and the consistency metrics.
pub fn evaluate(
    params: &[DetectorParams],
    layout: &AnchorLayout,
    scenes: &[Scene],
    assign: &AssignConfig,
    settings: &EvalSettings,
) -> Result<(EvalReport, Vec<PrCurve>)> {
    settings.validate()?;
    if params.len() != scenes.len() {
        return Err(Error::ShapeMismatch {
            what: "parameter tables",
            expected: scenes.len(),
            got: params.len(),
        });
    }
    let detections = params
        .iter()
        .map(|p| run_inference(p, layout, settings.score_threshold, settings.nms_threshold))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth: Vec<Vec<Object>> = scenes.iter().map(|s| s.objects.clone()).collect();

    let mut ap_per_iou = BTreeMap::new();
    let mut all_curves = Vec::new();
    let mut ap50 = 0.0;
    let mut ap75 = 0.0;
    let thresholds = coco_iou_thresholds();
    for (i, &thr) in thresholds.iter().enumerate() {
        let curves = pr_curves(&detections, &ground_truth, thr)?;
        let ap = curves.iter().map(PrCurve::average_precision).sum::<f64>() / curves.len() as f64;
        if i == 0 {
            ap50 = ap;
        }
        if i == 5 {
            ap75 = ap;
        }
        ap_per_iou.insert(format!("{thr:.2}"), ap);
        all_curves.extend(curves);
    }
    let ap_coco = ap_per_iou.values().sum::<f64>() / thresholds.len() as f64;
    let consistency = consistency_metrics(params, layout, scenes, assign)?;
    Ok((
        EvalReport {
            ap_per_iou,
            ap_coco,
            ap50,
            ap75,
            num_detections: detections.iter().map(Vec::len).sum(),
            consistency,
        },
        all_curves,
    ))
}

/// Interpolated PR curves as CSV rows `iou_threshold,category,recall,precision`.
pub fn pr_curves_csv(curves: &[PrCurve]) -> String {
    let mut out = String::from("iou_threshold,category,recall,precision\n");
    for c in curves {
        for (k, p) in c.interpolated.iter().enumerate() {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            out.push_str(&format!(
                "{:.2},{},{},{}\n",
                c.iou_threshold, c.category, r, p
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt_box() -> Object {
        Object::new(BBox::new(10.0, 10.0, 30.0, 30.0), 0)
    }

    #[test]
    fn perfect_detections_score_one() {
        let gt = vec![
            vec![gt_box()],
            vec![Object::new(BBox::new(0.0, 0.0, 5.0, 5.0), 1)],
        ];
        let dets: Vec<Vec<Detection>> = gt
            .iter()
            .map(|s| {
                s.iter()
                    .map(|o| Detection::new(o.bbox, o.category, 1.0))
                    .collect()
            })
            .collect();
        assert_eq!(average_precision(&dets, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&dets, &gt, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn no_detections_score_zero() {
        assert_eq!(
            average_precision(&[vec![]], &[vec![gt_box()]], 0.5).unwrap(),
            0.0
        );
    }

    #[test]
    fn fp_then_tp_is_one_half() {
        let fp = Detection::new(BBox::new(60.0, 60.0, 70.0, 70.0), 0, 0.9);
        let tp = Detection::new(gt_box().bbox, 0, 0.8);
        let ap = average_precision(&[vec![fp, tp]], &[vec![gt_box()]], 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        assert!(matches!(
            average_precision(&[vec![]], &[vec![]], 0.5),
            Err(Error::NoGroundTruth)
        ));
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let d = Detection::new(gt_box().bbox, 0, 0.9);
        let dup = Detection::new(gt_box().bbox, 0, 0.8);
        let curves = pr_curves(&[vec![d, dup]], &[vec![gt_box()]], 0.5).unwrap();
        assert_eq!(curves[0].precision, vec![1.0, 0.5]);
        assert_eq!(curves[0].average_precision(), 1.0);
    }

    #[test]
    fn agreement_examples() {
        assert!(!object_agreement(
            &[0.9, 0.2, 0.1, 0.1],
            &[0.3, 0.8, 0.2, 0.1]
        ));
        assert!(object_agreement(&[0.9, 0.2], &[0.95, 0.1]));
        assert!(!object_agreement(&[], &[]));
    }

    #[test]
    fn pearson_examples() {
        let xs = [0.1, 0.5, 0.3, 0.9];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.2, 0.3]), None);
        assert_eq!(pearson(&[1.0], &[0.2]), None);
    }

    #[test]
    fn inference_on_silent_table_is_empty() {
        let layout = AnchorLayout::single_level(4, 4, 8.0).unwrap();
        let mut params = DetectorParams::zeros(layout.num_anchors(), 2);
        params.category_logits_mut().fill(-20.0);
        assert!(run_inference(&params, &layout, 0.05, 0.6)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn inference_single_confident_anchor() {
        let layout = AnchorLayout::single_level(4, 4, 8.0).unwrap();
        let mut params = DetectorParams::zeros(layout.num_anchors(), 2);
        params.category_logits_mut().fill(-20.0);
        params.category_logits_mut()[5 * 2 + 1] = 20.0;
        params.objectness_logits_mut()[5] = 20.0;
        let dets = run_inference(&params, &layout, 0.05, 0.6).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].category, 1);
    }

    #[test]
    fn inference_suppresses_overlapping_pair() {
        // Neighbouring anchors one stride apart, both widened to 80 px:
        // IoU = 72 / 88.
        let layout = AnchorLayout::single_level(1, 2, 8.0).unwrap();
        let mut params = DetectorParams::zeros(2, 1);
        params.category_logits_mut().fill(5.0);
        params.objectness_logits_mut().fill(5.0);
        params.category_logits_mut()[1] = 4.0;
        let widen = (40.0f64 / 8.0).ln();
        for (i, v) in params.box_offsets_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = widen;
            }
        }
        let snap = crate::detector::decode(&params, &layout).unwrap();
        assert!(iou(&snap.boxes()[0], &snap.boxes()[1]) > 0.6);
        let dets = run_inference(&params, &layout, 0.05, 0.6).unwrap();
        assert_eq!(dets.len(), 1);
    }

    #[test]
    fn coco_thresholds() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[5], 0.75);
        assert_eq!(t[9], 0.95);
    }
}
