//! Experiment configuration: one TOML file, dotted `--set` overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use musu::detector::Level;
use musu::eval::EvalSettings;
use musu::{AnchorLayout, SceneSetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenes: SceneSetConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
    // Arrays of tables go last so the TOML writer can emit them.
    pub layout: LayoutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub anchors_per_location: usize,
    /// Seeds the scale/ratio draw when `anchors_per_location > 1`.
    pub shape_seed: u64,
    pub levels: Vec<Level>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            anchors_per_location: 1,
            shape_seed: 0,
            levels: vec![Level {
                grid_h: 16,
                grid_w: 16,
                stride: 8.0,
            }],
        }
    }
}

impl LayoutConfig {
    pub fn build(&self) -> Result<AnchorLayout> {
        AnchorLayout::with_random_shapes(
            self.levels.clone(),
            self.anchors_per_location,
            self.shape_seed,
        )
        .context("layout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write `pr_curves.csv` during `eval`.
    pub pr_curves: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            pr_curves: false,
        }
    }
}

/// Cartesian grid for `sweep`; an empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub bag_threshold: Vec<f64>,
    pub reg_tau_ratio: Vec<f64>,
    pub anchors_per_location: Vec<usize>,
    pub hard_targets: Vec<bool>,
    /// Run cells on the rayon pool.
    pub parallel: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alpha: vec![0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5, 1.0],
            bag_threshold: vec![],
            reg_tau_ratio: vec![],
            anchors_per_location: vec![],
            hard_targets: vec![],
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `--seed`, `--out`
    /// and then every `key=value` override, and validates the result.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        if let Some(seed) = seed {
            let v = Value::Integer(i64::try_from(seed).context("--seed too large")?);
            for key in ["scenes.seed", "train.seed", "layout.shape_seed"] {
                set_path(&mut table, key, v.clone())?;
            }
        }
        if let Some(out) = out {
            let dir = out
                .to_str()
                .ok_or_else(|| anyhow!("--out is not valid UTF-8"))?;
            set_path(&mut table, "output.dir", Value::String(dir.into()))?;
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{item}`"))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))
                .with_context(|| format!("--set {item}"))?;
        }
        let config = Self::from_table(table)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("invalid config at `{path}`: {}", e.into_inner())
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.layout.build()?;
        let s = &self.sweep;
        if s.alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            bail!("sweep.alpha values must be in [0, 1]");
        }
        if s.bag_threshold.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            bail!("sweep.bag_threshold values must be in (0, 1)");
        }
        if s.reg_tau_ratio.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            bail!("sweep.reg_tau_ratio values must be > 0");
        }
        if s.anchors_per_location.contains(&0) {
            bail!("sweep.anchors_per_location values must be >= 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the resolved TOML without the `output` section, hex encoded.
    pub fn hash(&self) -> String {
        let experiment = Self {
            output: OutputConfig::default(),
            ..self.clone()
        };
        Sha256::digest(experiment.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// TOML literal when it parses as one, `a/b` as a float (also inside a flat
/// `[..]` list), otherwise a bare string.
pub fn parse_value(raw: &str) -> Value {
    if let Ok(mut t) = format!("v = {raw}").parse::<Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if let Some(items) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let items: Vec<Value> = items
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(parse_value)
            .collect();
        return Value::Array(items);
    }
    if let Some((a, b)) = raw.split_once('/') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            return Value::Float(a / b);
        }
    }
    Value::String(raw.to_string())
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key `{key}`");
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{}` is not a table", parts[..=i].join(".")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
