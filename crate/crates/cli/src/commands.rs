use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use musu::assignment::DebugRecord;
use musu::detector::{TrainLog, TrainOutcome};
use musu::eval::{pr_curves_csv, EvalReport};
use musu::{
    decode, evaluate, generate_scenes, musu_assign, train_run, AnchorLayout, AssignConfig,
    AssignmentOutput, BBox, Checkpoint, Object, Point, PredictionSnapshot, SceneSet,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const SCENES_FILE: &str = "scenes.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CONSISTENCY_LOG_FILE: &str = "consistency_log.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PR_CURVES_FILE: &str = "pr_curves.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const SWEEP_RESULTS_FILE: &str = "sweep_results.csv";
pub const ABORT_DUMP_FILE: &str = "abort_dump.json";

fn prepare_out(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    config.write_resolved(&dir)?;
    Ok(dir)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_scenes(path: &Path, config: &ExperimentConfig) -> Result<SceneSet> {
    let set = SceneSet::load(path)?;
    set.validate(Some(config.scenes.num_categories))
        .with_context(|| format!("{} does not fit scenes.num_categories", path.display()))?;
    Ok(set)
}

pub fn generate(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = prepare_out(config)?;
    let set = generate_scenes(&config.scenes)?;
    let path = dir.join(SCENES_FILE);
    set.save(&path)?;
    Ok(path)
}

/// Trains on `scenes` (or a freshly generated set written next to the
/// outputs) and writes the checkpoint and logs.
pub fn train(config: &ExperimentConfig, scenes: Option<&Path>) -> Result<TrainOutcome> {
    let dir = prepare_out(config)?;
    let set = match scenes {
        Some(p) => load_scenes(p, config)?,
        None => {
            let set = generate_scenes(&config.scenes)?;
            set.save(&dir.join(SCENES_FILE))?;
            set
        }
    };
    let layout = config.layout.build()?;
    train_into(config, &set, &layout, &dir)
}

fn train_into(
    config: &ExperimentConfig,
    set: &SceneSet,
    layout: &AnchorLayout,
    dir: &Path,
) -> Result<TrainOutcome> {
    let k = config.scenes.num_categories;
    match train_run(&set.scenes, layout, k, &config.train) {
        Ok(outcome) => {
            outcome.log.write_csv(&dir.join(TRAIN_LOG_FILE))?;
            write(
                &dir.join(CONSISTENCY_LOG_FILE),
                consistency_csv(&outcome.log),
            )?;
            Checkpoint::new(layout.clone(), outcome.params.clone(), config.hash())
                .save(&dir.join(CHECKPOINT_FILE))?;
            Ok(outcome)
        }
        Err(abort) => {
            abort.log.write_csv(&dir.join(TRAIN_LOG_FILE))?;
            let dump = dir.join(ABORT_DUMP_FILE);
            write(&dump, abort.dump_json())?;
            Err(anyhow!("{abort}; state dumped to {}", dump.display()))
        }
    }
}

fn consistency_csv(log: &TrainLog) -> String {
    let mut out = String::from("step,agreement_rate,pearson,num_objects,num_pooled\n");
    for r in &log.consistency {
        let m = &r.metrics;
        let pearson = m.pearson.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, m.agreement_rate, pearson, m.num_objects, m.num_pooled
        ));
    }
    out
}

pub fn eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    scenes: Option<&Path>,
) -> Result<EvalReport> {
    let dir = prepare_out(config)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let scenes_path = scenes
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(SCENES_FILE));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let set = load_scenes(&scenes_path, config)?;
    eval_into(config, &ckpt, &set, &dir)
}

fn eval_into(
    config: &ExperimentConfig,
    ckpt: &Checkpoint,
    set: &SceneSet,
    dir: &Path,
) -> Result<EvalReport> {
    if ckpt.params.len() != set.scenes.len() {
        bail!(
            "checkpoint holds {} tables but the scene set has {} scenes",
            ckpt.params.len(),
            set.scenes.len()
        );
    }
    let (report, curves) = evaluate(
        &ckpt.params,
        &ckpt.layout,
        &set.scenes,
        &config.train.assign,
        &config.eval,
    )?;
    write(&dir.join(EVAL_REPORT_FILE), report.to_json())?;
    if config.output.pr_curves {
        write(&dir.join(PR_CURVES_FILE), pr_curves_csv(&curves))?;
    }
    Ok(report)
}

/// Hand-written assignment input for `assign-debug --snapshot`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignFixture {
    pub num_categories: usize,
    /// One row of category probabilities per anchor.
    pub probs: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
    pub centers: Vec<[f64; 2]>,
    pub objects: Vec<Object>,
}

impl AssignFixture {
    pub fn assign(&self, cfg: &AssignConfig) -> Result<AssignmentOutput> {
        if self.probs.len() != self.boxes.len() || self.centers.len() != self.boxes.len() {
            bail!(
                "fixture has {} probability rows, {} boxes and {} centers",
                self.probs.len(),
                self.boxes.len(),
                self.centers.len()
            );
        }
        if let Some(i) = self
            .probs
            .iter()
            .position(|r| r.len() != self.num_categories)
        {
            bail!(
                "fixture probs[{i}] does not have {} entries",
                self.num_categories
            );
        }
        let snap = PredictionSnapshot::new(
            self.num_categories,
            self.probs.iter().flatten().copied().collect(),
            self.boxes.clone(),
        )?;
        let centers: Vec<Point> = self
            .centers
            .iter()
            .map(|c| Point::new(c[0], c[1]))
            .collect();
        Ok(musu_assign(&snap, &self.objects, &centers, cfg)?)
    }
}

#[derive(Debug, Serialize)]
pub struct ObjectSummary {
    pub object: usize,
    pub category: usize,
    pub bag_size: usize,
    pub num_matched: usize,
    pub threshold: f64,
    pub fallback: bool,
    pub tau_cls: f64,
    pub tau_reg: f64,
}

#[derive(Debug, Serialize)]
pub struct AssignmentDump {
    pub assign: AssignConfig,
    pub objects: Vec<ObjectSummary>,
    pub records: Vec<DebugRecord>,
}

impl AssignmentDump {
    pub fn new(out: &AssignmentOutput, gt: &[Object], cfg: &AssignConfig) -> Self {
        let objects = out
            .objects
            .iter()
            .map(|o| ObjectSummary {
                object: o.bag.object,
                category: gt[o.bag.object].category,
                bag_size: o.bag.len(),
                num_matched: o.bag.num_matched,
                threshold: o.bag.threshold,
                fallback: o.bag.fallback,
                tau_cls: o.tau_cls,
                tau_reg: o.tau_reg,
            })
            .collect();
        Self {
            assign: cfg.clone(),
            objects,
            records: out.debug_records(),
        }
    }
}

pub enum AssignSource<'a> {
    Fixture(&'a Path),
    Trained {
        checkpoint: Option<&'a Path>,
        scenes: Option<&'a Path>,
        scene: usize,
    },
}

pub fn assign_debug(config: &ExperimentConfig, source: AssignSource<'_>) -> Result<AssignmentDump> {
    let dir = prepare_out(config)?;
    let cfg = &config.train.assign;
    let dump = match source {
        AssignSource::Fixture(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let fixture: AssignFixture = serde_json::from_str(&text)
                .with_context(|| format!("parsing fixture {}", path.display()))?;
            AssignmentDump::new(&fixture.assign(cfg)?, &fixture.objects, cfg)
        }
        AssignSource::Trained {
            checkpoint,
            scenes,
            scene,
        } => {
            let ckpt = Checkpoint::load(
                &checkpoint
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| dir.join(CHECKPOINT_FILE)),
            )?;
            let set = load_scenes(
                &scenes
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| dir.join(SCENES_FILE)),
                config,
            )?;
            let (params, objects) = ckpt
                .params
                .get(scene)
                .zip(set.scenes.get(scene))
                .ok_or_else(|| {
                    anyhow!("scene {scene} out of range ({} scenes)", set.scenes.len())
                })?;
            let snap = decode(params, &ckpt.layout)?;
            let out = musu_assign(&snap, &objects.objects, &ckpt.layout.centers(), cfg)?;
            AssignmentDump::new(&out, &objects.objects, cfg)
        }
    };
    let text = serde_json::to_string_pretty(&dump)?;
    write(&dir.join(ASSIGNMENT_FILE), text)?;
    Ok(dump)
}

/// One sweep cell: the varied settings and the resulting metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub alpha: f64,
    pub b: f64,
    pub tau_ratio: f64,
    pub anchors: usize,
    pub hard: bool,
    pub ap50: Option<f64>,
    pub ap_coco: Option<f64>,
    pub agreement: Option<f64>,
    pub pearson: Option<f64>,
    pub status: String,
}

pub fn sweep_cells(config: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let s = &config.sweep;
    let a = &config.train.assign;
    let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let alphas = or(&s.alpha, a.alpha);
    let bs = or(&s.bag_threshold, a.bag_threshold);
    let ratios = or(&s.reg_tau_ratio, a.reg_tau_ratio);
    let anchors = if s.anchors_per_location.is_empty() {
        vec![config.layout.anchors_per_location]
    } else {
        s.anchors_per_location.clone()
    };
    let hards = if s.hard_targets.is_empty() {
        vec![a.hard_targets]
    } else {
        s.hard_targets.clone()
    };

    let mut cells = Vec::new();
    for &alpha in &alphas {
        for &b in &bs {
            for &ratio in &ratios {
                for &n in &anchors {
                    for &hard in &hards {
                        let mut c = config.clone();
                        c.train.assign.alpha = alpha;
                        c.train.assign.bag_threshold = b;
                        c.train.assign.reg_tau_ratio = ratio;
                        c.train.assign.hard_targets = hard;
                        c.layout.anchors_per_location = n;
                        c.output.dir = config.output.dir.join(format!("cell_{:03}", cells.len()));
                        cells.push(c);
                    }
                }
            }
        }
    }
    cells
}

fn run_cell(index: usize, cell: &ExperimentConfig, set: &SceneSet) -> SweepRow {
    let a = &cell.train.assign;
    let mut row = SweepRow {
        cell: index,
        alpha: a.alpha,
        b: a.bag_threshold,
        tau_ratio: a.reg_tau_ratio,
        anchors: cell.layout.anchors_per_location,
        hard: a.hard_targets,
        ap50: None,
        ap_coco: None,
        agreement: None,
        pearson: None,
        status: "ok".into(),
    };
    let result = (|| -> Result<EvalReport> {
        let dir = prepare_out(cell)?;
        let layout = cell.layout.build()?;
        let outcome = train_into(cell, set, &layout, &dir)?;
        let ckpt = Checkpoint::new(layout, outcome.params, cell.hash());
        eval_into(cell, &ckpt, set, &dir)
    })();
    match result {
        Ok(r) => {
            row.ap50 = Some(r.ap50);
            row.ap_coco = Some(r.ap_coco);
            row.agreement = Some(r.consistency.agreement_rate);
            row.pearson = r.consistency.pearson;
        }
        Err(e) => row.status = format!("error: {e:#}"),
    }
    row
}

/// Trains and evaluates every grid cell on one shared scene set; fails
/// after writing the CSV if any cell failed.
pub fn sweep(config: &ExperimentConfig, scenes: Option<&Path>) -> Result<Vec<SweepRow>> {
    let dir = prepare_out(config)?;
    let set = match scenes {
        Some(p) => load_scenes(p, config)?,
        None => generate_scenes(&config.scenes)?,
    };
    set.save(&dir.join(SCENES_FILE))?;
    let cells = sweep_cells(config);
    let rows: Vec<SweepRow> = if config.sweep.parallel {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_cell(i, c, &set))
            .collect()
    } else {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| run_cell(i, c, &set))
            .collect()
    };

    let path = dir.join(SWEEP_RESULTS_FILE);
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;

    let failed: Vec<String> = rows
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| format!("cell {}: {}", r.cell, r.status))
        .collect();
    if !failed.is_empty() {
        bail!(
            "{} of {} sweep cells failed:\n{}",
            failed.len(),
            rows.len(),
            failed.join("\n")
        );
    }
    Ok(rows)
}
