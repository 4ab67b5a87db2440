//! Seeded synthetic scenes and their JSON file format.
//!
//! File schema (version 1):
//!
//! ```json
//! {"version": 1, "extent": [128, 128],
//!  "scenes": [{"objects": [{"box": [x1, y1, x2, y2], "category": 0}]}]}
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Object};

pub const SCENE_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub objects: Vec<Object>,
}

/// Scenes sharing one extent `(width, height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSet {
    pub version: u32,
    pub extent: [f64; 2],
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn new(extent: [f64; 2], scenes: Vec<Scene>) -> Self {
        Self {
            version: SCENE_FILE_VERSION,
            extent,
            scenes,
        }
    }

    /// Checks that every box is inside the extent with positive area and that
    /// categories are below `num_categories` (when given).
    pub fn validate(&self, num_categories: Option<usize>) -> Result<()> {
        let [w, h] = self.extent;
        for (s, scene) in self.scenes.iter().enumerate() {
            for (o, obj) in scene.objects.iter().enumerate() {
                let b = obj.bbox;
                let inside = b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h;
                if !inside || b.area() <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "scenes[{s}].objects[{o}]: box {:?} is empty or outside extent {w}x{h}",
                        b.to_array()
                    )));
                }
                if let Some(k) = num_categories {
                    if obj.category >= k {
                        return Err(Error::InvalidInput(format!(
                            "scenes[{s}].objects[{o}]: category {} >= {k}",
                            obj.category
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene set serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set = Self::from_json(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if set.version != SCENE_FILE_VERSION {
            return Err(Error::Version {
                what: "scene file",
                found: set.version,
                expected: SCENE_FILE_VERSION,
            });
        }
        set.validate(None)?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSetConfig {
    pub num_scenes: usize,
    pub num_categories: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Upper bound on IoU between any two boxes of a scene.
    pub max_pair_iou: f64,
    pub extent: [f64; 2],
    pub seed: u64,
    /// Rejection-sampling attempts allowed per object.
    pub max_attempts: usize,
}

impl Default for SceneSetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 20,
            num_categories: 5,
            max_objects: 5,
            min_side: 24.0,
            max_side: 80.0,
            max_pair_iou: 0.3,
            extent: [128.0, 128.0],
            seed: 0,
            max_attempts: 1000,
        }
    }
}

impl SceneSetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_categories == 0 {
            return bad("scenes.num_categories must be >= 1".into());
        }
        if self.max_objects == 0 {
            return bad("scenes.max_objects must be >= 1".into());
        }
        if !(self.min_side > 0.0 && self.min_side <= self.max_side) {
            return bad(format!(
                "scenes.min_side/max_side must satisfy 0 < min <= max, got {} / {}",
                self.min_side, self.max_side
            ));
        }
        let [w, h] = self.extent;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return bad(format!("scenes.extent must be positive, got {w}x{h}"));
        }
        if !(0.0..1.0).contains(&self.max_pair_iou) {
            return bad(format!(
                "scenes.max_pair_iou must be in [0, 1), got {}",
                self.max_pair_iou
            ));
        }
        if self.max_attempts == 0 {
            return bad("scenes.max_attempts must be >= 1".into());
        }
        Ok(())
    }
}

/// Rejection-samples `num_scenes` scenes of 1..=`max_objects` objects each.
///
/// Box sides are uniform in `[min_side, min(max_side, extent)]` and positions
/// uniform inside the extent. Output depends only on the config.
pub fn generate_scenes(config: &SceneSetConfig) -> Result<SceneSet> {
    config.validate()?;
    let [w, h] = config.extent;
    if config.min_side > w || config.min_side > h {
        return Err(Error::SceneGeneration {
            constraint: format!("min_side {} fits in extent {w}x{h}", config.min_side),
            attempts: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scenes = Vec::with_capacity(config.num_scenes);
    for _ in 0..config.num_scenes {
        let count = rng.gen_range(1..=config.max_objects);
        let mut objects: Vec<Object> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = None;
            for _ in 0..config.max_attempts {
                let bw = rng.gen_range(config.min_side..=config.max_side.min(w));
                let bh = rng.gen_range(config.min_side..=config.max_side.min(h));
                let x1 = rng.gen_range(0.0..=w - bw);
                let y1 = rng.gen_range(0.0..=h - bh);
                let bbox = BBox::new(x1, y1, x1 + bw, y1 + bh);
                let overlapping = objects.iter().any(|o| {
                    let v = iou(&o.bbox, &bbox);
                    v > config.max_pair_iou
                });
                if !overlapping {
                    placed = Some(bbox);
                    break;
                }
            }
            let bbox = placed.ok_or_else(|| Error::SceneGeneration {
                constraint: format!(
                    "max_pair_iou {} with {} objects of side >= {}",
                    config.max_pair_iou, count, config.min_side
                ),
                attempts: config.max_attempts,
            })?;
            let category = rng.gen_range(0..config.num_categories);
            objects.push(Object::new(bbox, category));
        }
        scenes.push(Scene { objects });
    }
    Ok(SceneSet::new(config.extent, scenes))
}
