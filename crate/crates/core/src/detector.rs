//! Direct-parameterized dense detector.
//!
//! Every anchor owns its own category logits, an objectness logit and four
//! raw box offsets. There is no feature extractor: the parameter table *is*
//! the model, which keeps every interaction between assignment and losses
//! while making exact gradient checks cheap.
//!
//! Decoding:
//!
//! * `p_ik = sigmoid(z_ik) * sigmoid(o_i)`
//! * sides `l, r = s * sigma * sqrt(rho) * exp(d)` and
//!   `t, b = s * sigma / sqrt(rho) * exp(d)` around the anchor center.
//!
//! With zero offsets and `sigma = rho = 1` every prediction is a `2s x 2s`
//! box centered on its anchor.

use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{musu_assign, AssignConfig, AssignmentOutput, PredictionSnapshot};
use crate::error::{ensure, Error, Result};
use crate::eval::{consistency_metrics, ConsistencyMetrics};
use crate::geometry::{BBox, Object, Point};
use crate::losses::{total_loss, FocalParams, LossBreakdown, OutputGradients};
use crate::scenes::Scene;

/// Initial per-category probability before the objectness factor.
pub const CATEGORY_PRIOR: f64 = 0.01;

/// One feature-map level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: f64,
}

/// Scale and aspect ratio of one anchor slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorShape {
    pub scale: f64,
    pub ratio: f64,
}

impl AnchorShape {
    pub const UNIT: AnchorShape = AnchorShape {
        scale: 1.0,
        ratio: 1.0,
    };
}

/// Where predictions live: levels of grids, each location tiled with the
/// same anchor slots.
///
/// Anchors are flattened in `(level, y, x, slot)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorLayout {
    levels: Vec<Level>,
    shapes: Vec<AnchorShape>,
}

/// Derived geometry of a single anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorGeometry {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub slot: usize,
    pub center: Point,
    /// Side lengths `(l, t, r, b)` produced by zero offsets.
    pub base_sides: [f64; 4],
}

impl AnchorLayout {
    pub fn new(levels: Vec<Level>, shapes: Vec<AnchorShape>) -> Result<Self> {
        ensure!(!levels.is_empty(), "anchor layout needs at least one level");
        ensure!(
            !shapes.is_empty(),
            "anchor layout needs at least one anchor per location"
        );
        for l in &levels {
            ensure!(
                l.grid_h > 0 && l.grid_w > 0 && l.stride > 0.0 && l.stride.is_finite(),
                "invalid level {l:?}"
            );
        }
        for s in &shapes {
            ensure!(
                (1.0..=2.0).contains(&s.scale) && (0.5..=2.0).contains(&s.ratio),
                "anchor shape {s:?} outside scale [1, 2] / ratio [1/2, 2]"
            );
        }
        Ok(Self { levels, shapes })
    }

    /// Single level, one unit anchor per location.
    pub fn single_level(grid_h: usize, grid_w: usize, stride: f64) -> Result<Self> {
        Self::new(
            vec![Level {
                grid_h,
                grid_w,
                stride,
            }],
            vec![AnchorShape::UNIT],
        )
    }

    /// `anchors_per_location` slots; one slot keeps the unit shape, more
    /// slots draw scale from `U[1, 2]` and ratio from `U[1/2, 2]`.
    pub fn with_random_shapes(
        levels: Vec<Level>,
        anchors_per_location: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure!(
            anchors_per_location >= 1,
            "anchors_per_location must be >= 1"
        );
        let shapes = if anchors_per_location == 1 {
            vec![AnchorShape::UNIT]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..anchors_per_location)
                .map(|_| AnchorShape {
                    scale: rng.gen_range(1.0..=2.0),
                    ratio: rng.gen_range(0.5..=2.0),
                })
                .collect()
        };
        Self::new(levels, shapes)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn shapes(&self) -> &[AnchorShape] {
        &self.shapes
    }

    pub fn anchors_per_location(&self) -> usize {
        self.shapes.len()
    }

    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.grid_h * l.grid_w).sum()
    }

    pub fn num_anchors(&self) -> usize {
        self.num_locations() * self.shapes.len()
    }

    pub fn geometry(&self) -> Vec<AnchorGeometry> {
        let mut out = Vec::with_capacity(self.num_anchors());
        for (li, level) in self.levels.iter().enumerate() {
            let s = level.stride;
            for y in 0..level.grid_h {
                for x in 0..level.grid_w {
                    let center = Point::new((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    for (slot, shape) in self.shapes.iter().enumerate() {
                        let root = shape.ratio.sqrt();
                        let horiz = s * shape.scale * root;
                        let vert = s * shape.scale / root;
                        out.push(AnchorGeometry {
                            level: li,
                            y,
                            x,
                            slot,
                            center,
                            base_sides: [horiz, vert, horiz, vert],
                        });
                    }
                }
            }
        }
        out
    }

    pub fn centers(&self) -> Vec<Point> {
        self.geometry().into_iter().map(|g| g.center).collect()
    }
}

/// Flat table of trainable values.
///
/// Layout: `[category logits (N x K) | objectness logits (N) | box offsets (N x 4)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    num_anchors: usize,
    num_categories: usize,
    values: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros(num_anchors: usize, num_categories: usize) -> Self {
        Self {
            num_anchors,
            num_categories,
            values: vec![0.0; num_anchors * (num_categories + 5)],
        }
    }

    pub fn from_values(
        num_anchors: usize,
        num_categories: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = num_anchors * (num_categories + 5);
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "detector parameters",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            num_anchors,
            num_categories,
            values,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn obj_offset(&self) -> usize {
        self.num_anchors * self.num_categories
    }

    fn box_offset(&self) -> usize {
        self.obj_offset() + self.num_anchors
    }

    pub fn category_logits(&self) -> &[f64] {
        &self.values[..self.obj_offset()]
    }

    pub fn category_logits_mut(&mut self) -> &mut [f64] {
        let end = self.obj_offset();
        &mut self.values[..end]
    }

    pub fn objectness_logits(&self) -> &[f64] {
        &self.values[self.obj_offset()..self.box_offset()]
    }

    pub fn objectness_logits_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.obj_offset(), self.box_offset());
        &mut self.values[a..b]
    }

    /// Raw `(l, t, r, b)` offsets of one anchor.
    pub fn box_offsets(&self, anchor: usize) -> [f64; 4] {
        let o = self.box_offset() + 4 * anchor;
        [
            self.values[o],
            self.values[o + 1],
            self.values[o + 2],
            self.values[o + 3],
        ]
    }

    pub fn box_offsets_mut(&mut self) -> &mut [f64] {
        let start = self.box_offset();
        &mut self.values[start..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Zero box offsets, zero objectness, category logits at the 0.01 prior.
pub fn init_detector(layout: &AnchorLayout, num_categories: usize) -> DetectorParams {
    let mut params = DetectorParams::zeros(layout.num_anchors(), num_categories);
    params.category_logits_mut().fill(logit(CATEGORY_PRIOR));
    params
}

/// Decoded outputs plus the intermediates needed for backpropagation.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub snapshot: PredictionSnapshot,
    category_sig: Vec<f64>,
    objectness_sig: Vec<f64>,
    sides: Vec<[f64; 4]>,
}

pub fn decode(params: &DetectorParams, layout: &AnchorLayout) -> Result<PredictionSnapshot> {
    decode_with_geometry(params, &layout.geometry()).map(|d| d.snapshot)
}

pub fn decode_with_geometry(
    params: &DetectorParams,
    geometry: &[AnchorGeometry],
) -> Result<Decoded> {
    if geometry.len() != params.num_anchors() {
        return Err(Error::ShapeMismatch {
            what: "anchor layout",
            expected: params.num_anchors(),
            got: geometry.len(),
        });
    }
    let k = params.num_categories();
    let category_sig: Vec<f64> = params
        .category_logits()
        .iter()
        .map(|&z| sigmoid(z))
        .collect();
    let objectness_sig: Vec<f64> = params
        .objectness_logits()
        .iter()
        .map(|&z| sigmoid(z))
        .collect();
    let probs = category_sig
        .iter()
        .enumerate()
        .map(|(idx, s)| s * objectness_sig[idx / k])
        .collect();

    let mut sides = Vec::with_capacity(geometry.len());
    let mut boxes = Vec::with_capacity(geometry.len());
    for (i, g) in geometry.iter().enumerate() {
        let d = params.box_offsets(i);
        let side: [f64; 4] = std::array::from_fn(|c| g.base_sides[c] * d[c].exp());
        boxes.push(BBox::from_center_ltrb(
            g.center, side[0], side[1], side[2], side[3],
        ));
        sides.push(side);
    }
    let snapshot = PredictionSnapshot::new(k, probs, boxes)?;
    Ok(Decoded {
        snapshot,
        category_sig,
        objectness_sig,
        sides,
    })
}

/// Chains output gradients through the sigmoid product and the exp box
/// parameterization into a flat gradient over [`DetectorParams`].
pub fn backprop(params: &DetectorParams, decoded: &Decoded, grads: &OutputGradients) -> Vec<f64> {
    let n = params.num_anchors();
    let k = params.num_categories();
    let mut out = vec![0.0; params.len()];
    let (cls, rest) = out.split_at_mut(n * k);
    let (obj, boxes) = rest.split_at_mut(n);
    for i in 0..n {
        let so = decoded.objectness_sig[i];
        let mut d_obj = 0.0;
        for c in 0..k {
            let idx = i * k + c;
            let sc = decoded.category_sig[idx];
            let g = grads.probs[idx];
            cls[idx] = g * so * sc * (1.0 - sc);
            d_obj += g * sc;
        }
        obj[i] = d_obj * so * (1.0 - so);

        // x1 = cx - l, y1 = cy - t, x2 = cx + r, y2 = cy + b; d side / d offset = side.
        let side = decoded.sides[i];
        let g = grads.boxes[i];
        boxes[4 * i] = -g[0] * side[0];
        boxes[4 * i + 1] = -g[1] * side[1];
        boxes[4 * i + 2] = g[2] * side[2];
        boxes[4 * i + 3] = g[3] * side[3];
    }
    out
}

/// Loss, assignment and flat gradient for one scene at the current parameters.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub breakdown: LossBreakdown,
    pub assignment: AssignmentOutput,
    pub grad: Vec<f64>,
}

pub fn evaluate_loss(
    params: &DetectorParams,
    geometry: &[AnchorGeometry],
    objects: &[Object],
    assign: &AssignConfig,
    focal: &FocalParams,
) -> Result<LossEvaluation> {
    let decoded = decode_with_geometry(params, geometry)?;
    let centers: Vec<Point> = geometry.iter().map(|g| g.center).collect();
    let assignment = musu_assign(&decoded.snapshot, objects, &centers, assign)?;
    let (breakdown, out_grads) = total_loss(&decoded.snapshot, &assignment, objects, focal)?;
    let grad = backprop(params, &decoded, &out_grads);
    Ok(LossEvaluation {
        breakdown,
        assignment,
        grad,
    })
}

/// Loss at `params` with a fixed assignment (weights treated as constants).
pub fn loss_with_assignment(
    params: &DetectorParams,
    geometry: &[AnchorGeometry],
    objects: &[Object],
    assignment: &AssignmentOutput,
    focal: &FocalParams,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let decoded = decode_with_geometry(params, geometry)?;
    let (breakdown, out_grads) = total_loss(&decoded.snapshot, assignment, objects, focal)?;
    Ok((breakdown, backprop(params, &decoded, &out_grads)))
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu * v + (g + wd * x)`, `x <- x - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, len: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, values: &mut [f64], grad: &[f64]) {
        for ((x, v), g) in values.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *x;
            *x -= self.learning_rate * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Seeds the per-epoch scene order.
    pub seed: u64,
    /// Consistency metrics are logged every this many steps (0 disables).
    pub metrics_every: usize,
    pub assign: AssignConfig,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 2000,
            seed: 0,
            metrics_every: 500,
            assign: AssignConfig::default(),
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.assign.validate()?;
        self.focal.validate()
    }
}

/// Result of one optimization step; losses refer to the parameters before
/// the update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub assignment: AssignmentOutput,
}

// Large but finite offsets overflow exp() during decoding.
fn boxes_finite(params: &DetectorParams, geometry: &[AnchorGeometry]) -> bool {
    geometry.iter().enumerate().all(|(i, g)| {
        let d = params.box_offsets(i);
        (0..4).all(|c| (g.base_sides[c] * d[c].exp()).is_finite())
    })
}

/// decode -> assign -> loss -> backprop -> SGD update.
pub fn train_step(
    params: &mut DetectorParams,
    optimizer: &mut Sgd,
    geometry: &[AnchorGeometry],
    objects: &[Object],
    config: &TrainConfig,
    step: usize,
) -> Result<StepOutput> {
    let eval = match evaluate_loss(params, geometry, objects, &config.assign, &config.focal) {
        Ok(eval) => eval,
        Err(Error::InvalidInput(_)) if !boxes_finite(params, geometry) => {
            return Err(Error::NonFinite {
                quantity: "decoded boxes",
                step,
            })
        }
        Err(e) => return Err(e),
    };
    if !eval.breakdown.is_finite() {
        return Err(Error::NonFinite {
            quantity: "loss",
            step,
        });
    }
    if !eval.grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite {
            quantity: "gradient",
            step,
        });
    }
    optimizer.step(params.values_mut(), &eval.grad);
    if !params.is_finite() {
        return Err(Error::NonFinite {
            quantity: "parameters",
            step,
        });
    }
    Ok(StepOutput {
        breakdown: eval.breakdown,
        assignment: eval.assignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scene: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub metrics: ConsistencyMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub consistency: Vec<MetricsRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,l_cls_pos,l_cls_neg,l_cls_bg,l_reg,l_total";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            let b = &r.breakdown;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, b.l_cls_pos, b.l_cls_neg_penalty, b.l_cls_background, b.l_reg, b.l_total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A run that stopped on a non-finite value; keeps the state at the failure.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub step: usize,
    pub scene: usize,
    /// Parameters of the failing scene.
    pub params: DetectorParams,
    pub log: TrainLog,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted at step {} (scene {}): {}",
            self.step, self.scene, self.error
        )
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

#[derive(Serialize)]
struct AbortDump<'a> {
    error: String,
    step: usize,
    scene: usize,
    last_losses: Option<&'a StepRecord>,
    params: &'a DetectorParams,
}

impl TrainAbort {
    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&AbortDump {
            error: self.error.to_string(),
            step: self.step,
            scene: self.scene,
            last_losses: self.log.steps.last(),
            params: &self.params,
        })
        .expect("dump serializes")
    }
}

/// Trained tables, one per scene, in scene order.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Vec<DetectorParams>,
    pub log: TrainLog,
}

/// Trains one parameter table per scene, starting each from
/// [`init_detector`], for `config.steps` steps in total.
///
/// The detector has no image input, so a scene's predictions are its own
/// table; every step updates the table (and momentum buffer) of one scene.
/// Scenes are visited in a fresh seeded permutation every epoch.
pub fn train_run(
    scenes: &[Scene],
    layout: &AnchorLayout,
    num_categories: usize,
    config: &TrainConfig,
) -> std::result::Result<TrainOutcome, Box<TrainAbort>> {
    let abort = |error: Error| {
        Box::new(TrainAbort {
            error,
            step: 0,
            scene: 0,
            params: init_detector(layout, num_categories),
            log: TrainLog::default(),
        })
    };
    if scenes.is_empty() {
        return Err(abort(Error::InvalidInput("no scenes to train on".into())));
    }
    config.validate().map_err(abort)?;

    let geometry = layout.geometry();
    let init = init_detector(layout, num_categories);
    let mut params = vec![init.clone(); scenes.len()];
    let mut optimizers = vec![
        Sgd::new(
            config.learning_rate,
            config.momentum,
            config.weight_decay,
            init.len()
        );
        scenes.len()
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        if step % scenes.len() == 0 {
            order.shuffle(&mut rng);
        }
        let scene = order[step % scenes.len()];
        match train_step(
            &mut params[scene],
            &mut optimizers[scene],
            &geometry,
            &scenes[scene].objects,
            config,
            step,
        ) {
            Ok(out) => log.steps.push(StepRecord {
                step,
                scene,
                breakdown: out.breakdown,
            }),
            Err(error) => {
                return Err(Box::new(TrainAbort {
                    error,
                    step,
                    scene,
                    params: params.swap_remove(scene),
                    log,
                }))
            }
        }
        let done = step + 1;
        if config.metrics_every > 0 && (done % config.metrics_every == 0 || done == config.steps) {
            if let Ok(metrics) = consistency_metrics(&params, layout, scenes, &config.assign) {
                log.consistency.push(MetricsRecord {
                    step: done,
                    metrics,
                });
            }
        }
    }
    Ok(TrainOutcome { params, log })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with everything needed to decode them again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub layout: AnchorLayout,
    /// One table per scene of the training set.
    pub params: Vec<DetectorParams>,
}

impl Checkpoint {
    pub fn new(layout: AnchorLayout, params: Vec<DetectorParams>, config_hash: String) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash,
            layout,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        for p in &ckpt.params {
            if p.num_anchors() != ckpt.layout.num_anchors()
                || p.len() != p.num_anchors() * (p.num_categories() + 5)
            {
                return Err(Error::ShapeMismatch {
                    what: "checkpoint parameters",
                    expected: ckpt.layout.num_anchors(),
                    got: p.num_anchors(),
                });
            }
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn zero_offsets_give_two_stride_boxes() {
        let layout = AnchorLayout::single_level(2, 2, 8.0).unwrap();
        let params = init_detector(&layout, 3);
        let snap = decode(&params, &layout).unwrap();
        assert_eq!(snap.boxes()[0], BBox::new(-4.0, -4.0, 12.0, 12.0));
        for b in snap.boxes() {
            assert_eq!((b.width(), b.height()), (16.0, 16.0));
        }
    }

    #[test]
    fn scale_and_ratio_split() {
        let level = Level {
            grid_h: 1,
            grid_w: 1,
            stride: 8.0,
        };
        let shapes = vec![
            AnchorShape {
                scale: 2.0,
                ratio: 1.0,
            },
            AnchorShape {
                scale: 1.0,
                ratio: 2.0,
            },
        ];
        let layout = AnchorLayout::new(vec![level], shapes).unwrap();
        let snap = decode(&init_detector(&layout, 1), &layout).unwrap();
        let (a, b) = (snap.boxes()[0], snap.boxes()[1]);
        assert!(close(a.width(), 32.0) && close(a.height(), 32.0));
        assert!(close(b.width(), 16.0 * 2f64.sqrt()));
        assert!(close(b.height(), 16.0 / 2f64.sqrt()));
        assert!((b.width() - 22.627).abs() < 1e-3 && (b.height() - 11.314).abs() < 1e-3);
    }

    #[test]
    fn init_prior_and_zero_offsets() {
        let layout = AnchorLayout::single_level(3, 3, 8.0).unwrap();
        let params = init_detector(&layout, 4);
        assert!((0..params.num_anchors()).all(|i| params.box_offsets(i) == [0.0; 4]));
        assert!(params.objectness_logits().iter().all(|&z| z == 0.0));
        let snap = decode(&params, &layout).unwrap();
        // Category prior times sigmoid(0).
        assert!(snap.probs().iter().all(|&p| close(p, CATEGORY_PRIOR * 0.5)));
    }

    #[test]
    fn zero_logits_decode_to_quarter() {
        let layout = AnchorLayout::single_level(1, 2, 8.0).unwrap();
        let params = DetectorParams::zeros(layout.num_anchors(), 2);
        let snap = decode(&params, &layout).unwrap();
        assert!(snap.probs().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn saturated_logit_is_tiny() {
        let layout = AnchorLayout::single_level(1, 1, 8.0).unwrap();
        let mut params = DetectorParams::zeros(1, 1);
        params.category_logits_mut()[0] = -20.0;
        let p = decode(&params, &layout).unwrap().prob(0, 0);
        assert!(p > 0.0 && p < 1e-8);
    }

    #[test]
    fn random_shapes_stay_in_range_and_are_seeded() {
        let level = Level {
            grid_h: 2,
            grid_w: 2,
            stride: 8.0,
        };
        let a = AnchorLayout::with_random_shapes(vec![level], 3, 7).unwrap();
        let b = AnchorLayout::with_random_shapes(vec![level], 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_anchors(), 12);
        assert!(a
            .shapes()
            .iter()
            .all(|s| (1.0..=2.0).contains(&s.scale) && (0.5..=2.0).contains(&s.ratio)));
        let single = AnchorLayout::with_random_shapes(vec![level], 1, 7).unwrap();
        assert_eq!(single.shapes(), &[AnchorShape::UNIT]);
    }

    #[test]
    fn anchor_order_is_level_y_x_slot() {
        let layout = AnchorLayout::with_random_shapes(
            vec![
                Level {
                    grid_h: 2,
                    grid_w: 3,
                    stride: 8.0,
                },
                Level {
                    grid_h: 1,
                    grid_w: 2,
                    stride: 16.0,
                },
            ],
            2,
            1,
        )
        .unwrap();
        let geo = layout.geometry();
        assert_eq!(geo.len(), (6 + 2) * 2);
        assert_eq!(
            (geo[3].level, geo[3].y, geo[3].x, geo[3].slot),
            (0, 0, 1, 1)
        );
        assert_eq!(geo[6].center, Point::new(4.0, 12.0));
        assert_eq!(geo[12].level, 1);
        assert_eq!(geo[12].center, Point::new(8.0, 8.0));
    }

    #[test]
    fn sgd_zero_learning_rate_is_identity() {
        let mut x = vec![1.0, -2.0, 3.5];
        let before = x.clone();
        let mut opt = Sgd::new(0.0, 0.9, 0.1, 3);
        opt.step(&mut x, &[10.0, 10.0, -10.0]);
        assert_eq!(x, before);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut x = vec![0.0];
        let mut opt = Sgd::new(0.1, 0.5, 0.0, 1);
        opt.step(&mut x, &[1.0]);
        opt.step(&mut x, &[1.0]);
        // v1 = 1, v2 = 1.5
        assert!(close(x[0], -0.25));
    }

    #[test]
    fn layout_validation() {
        assert!(AnchorLayout::single_level(0, 4, 8.0).is_err());
        let level = Level {
            grid_h: 1,
            grid_w: 1,
            stride: 8.0,
        };
        assert!(AnchorLayout::new(
            vec![level],
            vec![AnchorShape {
                scale: 3.0,
                ratio: 1.0
            }]
        )
        .is_err());
        assert!(AnchorLayout::new(vec![level], vec![]).is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let log = TrainLog {
            steps: vec![StepRecord {
                step: 0,
                scene: 0,
                breakdown: LossBreakdown::default(),
            }],
            consistency: vec![],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,l_cls_pos,l_cls_neg,l_cls_bg,l_reg,l_total")
        );
        assert_eq!(lines.next(), Some("0,0,0,0,0,0"));
    }
}
