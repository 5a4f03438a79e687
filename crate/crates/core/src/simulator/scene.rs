use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: f64,
    pub height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of `sqrt(w * h)` for objects.
    pub min_size: f64,
    pub max_size: f64,
    /// Aspect ratios `w / h` are log-uniform in `[1 / max_aspect, max_aspect]`.
    pub max_aspect: f64,
    pub max_pair_iou: f64,
    pub num_classes: usize,
    /// Placement attempts per object before giving up.
    pub rejection_budget: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64.0,
            height: 64.0,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 32.0,
            max_aspect: 2.0,
            max_pair_iou: 0.3,
            num_classes: 1,
            rejection_budget: 1000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0.0
            && self.height > 0.0
            && self.min_objects >= 1
            && self.max_objects >= self.min_objects
            && self.min_size > 0.0
            && self.max_size >= self.min_size
            && self.max_aspect >= 1.0
            && (0.0..=1.0).contains(&self.max_pair_iou)
            && self.num_classes >= 1
            && self.rejection_budget >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid scene config {self:?}")));
        }
        let largest_side = self.max_size * self.max_aspect.sqrt();
        if largest_side > self.width.min(self.height) {
            return Err(Error::Config(format!(
                "objects up to {largest_side} wide do not fit in a {}x{} scene",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    /// Latent in `[0, 1]`; harder objects yield noisier features.
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds: BBox,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

/// Draws a scene whose objects lie inside the bounds and overlap each other
/// with IoU at most `max_pair_iou`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let log_aspect = cfg.max_aspect.ln();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for n in 0..count {
        let mut placed = None;
        for _ in 0..cfg.rejection_budget {
            let size = rng.gen_range(cfg.min_size..=cfg.max_size);
            let aspect = if log_aspect > 0.0 {
                rng.gen_range(-log_aspect..=log_aspect).exp()
            } else {
                1.0
            };
            let w = size * aspect.sqrt();
            let h = size / aspect.sqrt();
            let x1 = rng.gen_range(0.0..=cfg.width - w);
            let y1 = rng.gen_range(0.0..=cfg.height - h);
            let candidate = BBox::new(x1, y1, x1 + w, y1 + h);
            if objects.iter().all(|o| iou(&o.bbox, &candidate) <= cfg.max_pair_iou) {
                placed = Some(candidate);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {n} of {count} within {} attempts (seed {seed})",
                cfg.rejection_budget
            ))
        })?;
        objects.push(SceneObject {
            bbox,
            class_id: rng.gen_range(0..cfg.num_classes),
            difficulty: rng.gen_range(0.0..=1.0),
        });
    }
    Ok(Scene {
        bounds: cfg.bounds(),
        objects,
        seed,
    })
}
