//! Independent reference implementations and random-instance generators.
//!
//! Nothing here calls into the assignment or loss code paths it is used to
//! check; IoU, matching, bagging and ranking are re-derived with plain loops.

#![allow(dead_code)]
// Plain index loops are the point of a reference implementation.
#![allow(clippy::needless_range_loop)]

use musu::{BBox, Object, Point, PredictionSnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random assignment problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub num_categories: usize,
    pub probs: Vec<Vec<f64>>,
    pub boxes: Vec<[f64; 4]>,
    pub centers: Vec<[f64; 2]>,
    pub objects: Vec<([f64; 4], usize)>,
}

impl Instance {
    pub fn snapshot(&self) -> PredictionSnapshot {
        PredictionSnapshot::new(
            self.num_categories,
            self.probs.iter().flatten().copied().collect(),
            self.boxes.iter().map(|b| BBox::from(*b)).collect(),
        )
        .unwrap()
    }

    pub fn gt(&self) -> Vec<Object> {
        self.objects
            .iter()
            .map(|(b, c)| Object::new(BBox::from(*b), *c))
            .collect()
    }

    pub fn centers(&self) -> Vec<Point> {
        self.centers
            .iter()
            .map(|c| Point::new(c[0], c[1]))
            .collect()
    }
}

fn random_box(r: &mut ChaCha8Rng, extent: f64, min_side: f64, max_side: f64) -> [f64; 4] {
    let w = r.gen_range(min_side..max_side);
    let h = r.gen_range(min_side..max_side);
    let x = r.gen_range(0.0..extent - w);
    let y = r.gen_range(0.0..extent - h);
    [x, y, x + w, y + h]
}

/// Up to `max_anchors` anchors and 1..=`max_objects` objects in a 64x64 square.
///
/// Anchor centers are drawn inside a random object most of the time so that
/// bags are non-trivial; predicted boxes are jittered around the centers.
pub fn random_instance(r: &mut ChaCha8Rng, max_anchors: usize, max_objects: usize) -> Instance {
    let num_categories = r.gen_range(1..=4);
    let n_obj = r.gen_range(1..=max_objects);
    let objects: Vec<([f64; 4], usize)> = (0..n_obj)
        .map(|_| {
            (
                random_box(r, 64.0, 8.0, 40.0),
                r.gen_range(0..num_categories),
            )
        })
        .collect();
    let n = r.gen_range(1..=max_anchors);
    let mut centers = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        let c = if r.gen_bool(0.85) {
            let (b, _) = objects[r.gen_range(0..n_obj)];
            [r.gen_range(b[0]..b[2]), r.gen_range(b[1]..b[3])]
        } else {
            [r.gen_range(0.0..64.0), r.gen_range(0.0..64.0)]
        };
        let l = r.gen_range(1.0..24.0);
        let t = r.gen_range(1.0..24.0);
        let rr = r.gen_range(1.0..24.0);
        let bb = r.gen_range(1.0..24.0);
        boxes.push([c[0] - l, c[1] - t, c[0] + rr, c[1] + bb]);
        centers.push(c);
        probs.push((0..num_categories).map(|_| r.gen_range(0.0..1.0)).collect());
    }
    Instance {
        num_categories,
        probs,
        boxes,
        centers,
        objects,
    }
}

pub fn ref_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |x: &[f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefParams {
    pub theta: f64,
    pub b: f64,
    pub alpha: f64,
    pub reg_ratio: f64,
    pub hard: bool,
    pub fixed_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefAnchor {
    pub object: Option<usize>,
    pub rank_cls: Option<usize>,
    pub rank_reg: Option<usize>,
    pub w_cls: f64,
    pub w_reg: f64,
}

#[derive(Debug, Clone)]
pub struct RefOutput {
    pub anchors: Vec<RefAnchor>,
    pub bags: Vec<Vec<usize>>,
    pub tau: Vec<(f64, f64)>,
}

/// Rank of position `i`: number of values strictly greater, plus equal
/// values at earlier positions.
fn count_rank(values: &[f64], i: usize) -> usize {
    (0..values.len())
        .filter(|&k| values[k] > values[i] || (values[k] == values[i] && k < i))
        .count()
}

/// Triple-loop reference of the whole assignment.
pub fn reference_assign(inst: &Instance, p: &RefParams) -> RefOutput {
    let n = inst.centers.len();
    // Matching.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let c = inst.centers[i];
        let mut best: Option<usize> = None;
        for (j, (g, _)) in inst.objects.iter().enumerate() {
            if !(c[0] > g[0] && c[0] < g[2] && c[1] > g[1] && c[1] < g[3]) {
                continue;
            }
            best = match best {
                None => Some(j),
                Some(b) => {
                    let (vj, vb) = (
                        ref_iou(&inst.boxes[i], g),
                        ref_iou(&inst.boxes[i], &inst.objects[b].0),
                    );
                    let area = |x: &[f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
                    if vj > vb || (vj == vb && area(g) < area(&inst.objects[b].0)) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        owner[i] = best;
    }

    let mut anchors = vec![
        RefAnchor {
            object: None,
            rank_cls: None,
            rank_reg: None,
            w_cls: 0.0,
            w_reg: 0.0
        };
        n
    ];
    let mut bags = Vec::new();
    let mut taus = Vec::new();
    for (j, (g, cat)) in inst.objects.iter().enumerate() {
        let matched: Vec<usize> = (0..n).filter(|&i| owner[i] == Some(j)).collect();
        let mut max_joint: f64 = 0.0;
        for &i in &matched {
            let joint = inst.probs[i][*cat] * ref_iou(&inst.boxes[i], g).powf(p.theta);
            if joint > max_joint {
                max_joint = joint;
            }
        }
        let t = p.b * max_joint;
        let fallback = max_joint == 0.0;
        let mut bag = Vec::new();
        for &i in &matched {
            let joint = inst.probs[i][*cat] * ref_iou(&inst.boxes[i], g).powf(p.theta);
            if fallback || joint >= t {
                bag.push(i);
            }
        }
        let size = bag.len() as f64;
        let tau_cls = p.fixed_tau.unwrap_or(size.sqrt());
        let tau_reg = p.reg_ratio * tau_cls;
        let mut vc = Vec::new();
        let mut vr = Vec::new();
        for &i in &bag {
            let pi = inst.probs[i][*cat];
            let o = ref_iou(&inst.boxes[i], g);
            let qi = o.powf(p.theta);
            if fallback {
                vc.push(o);
                vr.push(o);
            } else {
                vc.push(qi * pi.powf(p.alpha));
                vr.push(pi * qi.powf(p.alpha));
            }
        }
        for (k, &i) in bag.iter().enumerate() {
            let rc = count_rank(&vc, k);
            let rg = count_rank(&vr, k);
            let weight = |r: usize, tau: f64| {
                if p.hard {
                    if (r as f64) < tau {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    (-(r as f64) / tau).exp()
                }
            };
            anchors[i] = RefAnchor {
                object: Some(j),
                rank_cls: Some(rc),
                rank_reg: Some(rg),
                w_cls: weight(rc, tau_cls),
                w_reg: weight(rg, tau_reg),
            };
        }
        bags.push(bag);
        taus.push((tau_cls, tau_reg));
    }
    RefOutput {
        anchors,
        bags,
        tau: taus,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error for gradient comparison: `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Small random detector problem: grid layout, random table, 1..=2 objects.
pub struct DetectorInstance {
    pub layout: musu::AnchorLayout,
    pub params: musu::DetectorParams,
    pub objects: Vec<Object>,
}

pub fn random_detector_instance(
    r: &mut ChaCha8Rng,
    grid: usize,
    max_objects: usize,
) -> DetectorInstance {
    use musu::detector::Level;
    let stride = 8.0;
    let extent = grid as f64 * stride;
    let anchors = r.gen_range(1..=2);
    let layout = musu::AnchorLayout::with_random_shapes(
        vec![Level {
            grid_h: grid,
            grid_w: grid,
            stride,
        }],
        anchors,
        r.gen(),
    )
    .unwrap();
    let k = r.gen_range(1..=3);
    let n = layout.num_anchors();
    let mut values = Vec::with_capacity(n * (k + 5));
    values.extend((0..n * k).map(|_| r.gen_range(-3.0..2.0)));
    values.extend((0..n).map(|_| r.gen_range(-2.0..2.0)));
    values.extend((0..n * 4).map(|_| r.gen_range(-0.6..0.6)));
    let params = musu::DetectorParams::from_values(n, k, values).unwrap();
    let n_obj = r.gen_range(1..=max_objects);
    let objects = (0..n_obj)
        .map(|_| {
            Object::new(
                BBox::from(random_box(r, extent, 10.0, extent * 0.7)),
                r.gen_range(0..k),
            )
        })
        .collect();
    DetectorInstance {
        layout,
        params,
        objects,
    }
}
