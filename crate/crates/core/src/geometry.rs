//! Axis-aligned boxes, IoU / GIoU (with analytic gradients) and class-wise NMS.

use serde::{Deserialize, Serialize};

/// A point in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle in corner form `(x1, y1, x2, y2)`.
///
/// Valid boxes satisfy `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from a center and distances to the four sides.
    pub fn from_center_ltrb(center: Point, l: f64, t: f64, r: f64, b: f64) -> Self {
        Self::new(center.x - l, center.y - t, center.x + r, center.y + b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// True when `p` lies strictly inside the box (boundary excluded).
    pub fn contains_strict(&self, p: Point) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box enclosing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }
}

/// Ground-truth object: a box with a category id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Object {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
}

impl Object {
    pub fn new(bbox: BBox, category: usize) -> Self {
        Self { bbox, category }
    }
}

/// A scored, categorized box emitted by inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, category: usize, score: f64) -> Self {
        Self {
            bbox,
            category,
            score,
        }
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou_loss(a, b).loss
}

/// Value and gradient of the GIoU loss w.r.t. the predicted box corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiouLoss {
    pub loss: f64,
    /// d loss / d (x1, y1, x2, y2) of the prediction.
    pub grad: [f64; 4],
}

/// `1 - GIoU(pred, gt)` and its gradient w.r.t. `pred`.
///
/// The gradient is exact away from the measure-zero set where an edge of
/// `pred` coincides with an edge of `gt`; on that set the one-sided
/// derivative taken with `pred` moving inward is used. A zero-area
/// prediction is handled by the same formulas since the union stays positive
/// as long as `gt` has positive area.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> GiouLoss {
    let pw = pred.x2 - pred.x1;
    let ph = pred.y2 - pred.y1;
    let area_p = pw * ph;
    let area_g = gt.area();

    let iw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };

    let cw = pred.x2.max(gt.x2) - pred.x1.min(gt.x1);
    let ch = pred.y2.max(gt.y2) - pred.y1.min(gt.y1);
    let enclose = cw * ch;

    let union = area_p + area_g - inter;
    if union <= 0.0 || enclose <= 0.0 {
        return GiouLoss {
            loss: 1.0,
            grad: [0.0; 4],
        };
    }

    // loss = 2 - I/U - U/C
    let loss = 2.0 - inter / union - union / enclose;

    let d_area_p = [-ph, -pw, ph, pw];

    let mut d_inter = [0.0; 4];
    if overlapping {
        // x1 binds when pred.x1 >= gt.x1, x2 binds when pred.x2 <= gt.x2.
        if pred.x1 >= gt.x1 {
            d_inter[0] = -ih;
        }
        if pred.y1 >= gt.y1 {
            d_inter[1] = -iw;
        }
        if pred.x2 <= gt.x2 {
            d_inter[2] = ih;
        }
        if pred.y2 <= gt.y2 {
            d_inter[3] = iw;
        }
    }

    let mut d_enclose = [0.0; 4];
    if pred.x1 < gt.x1 {
        d_enclose[0] = -ch;
    }
    if pred.y1 < gt.y1 {
        d_enclose[1] = -cw;
    }
    if pred.x2 > gt.x2 {
        d_enclose[2] = ch;
    }
    if pred.y2 > gt.y2 {
        d_enclose[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_p[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        grad[k] = -d_iou - d_ratio;
    }
    GiouLoss { loss, grad }
}

/// Class-wise greedy non-maximum suppression.
///
/// Detections scoring below `score_threshold` are dropped first. The rest are
/// visited by descending score (ties by input order); a detection is removed
/// when its IoU with an already kept detection of the same category exceeds
/// `iou_threshold`. The result is sorted by descending score.
pub fn nms(detections: &[Detection], iou_threshold: f64, score_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= score_threshold)
        .collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));

    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let cand = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category == cand.category && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}
