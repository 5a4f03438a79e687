use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode, encode, iou, BBox, BoxDelta};
use crate::losses::{clamp_score, SCORE_EPS};

use super::anchors::{match_anchors, AnchorSet, Assignment, MatchResult};
use super::scene::Scene;

/// Decoded widths/heights are limited to `exp(MAX_LOG_SCALE)` times the anchor.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Std-dev of the offset noise for the easiest objects.
    pub noise_min: f64,
    /// Std-dev of the offset noise for the hardest objects.
    pub noise_max: f64,
    /// Offset noise grows as `difficulty^noise_power`; large powers leave
    /// most objects clean and a minority of outliers.
    pub noise_power: f64,
    /// Std-dev of the noise on the visibility cue.
    pub visibility_noise: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            noise_min: 0.01,
            noise_max: 0.5,
            noise_power: 4.0,
            visibility_noise: 0.1,
        }
    }
}

/// Bias, anchor geometry (4), noisy offsets (4), their magnitudes (4),
/// visibility cue, and a class one-hot when there is more than one class.
pub fn feature_dim(num_classes: usize) -> usize {
    14 + if num_classes > 1 { num_classes } else { 0 }
}

/// A scene with its anchor assignment and fixed per-anchor features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub scene: Scene,
    pub matching: MatchResult,
    /// Row-major `anchors x dim`.
    pub features: Vec<f64>,
    pub dim: usize,
    /// Regression target per anchor, present for positives only.
    pub targets: Vec<Option<BoxDelta>>,
}

impl SceneSample {
    pub fn row(&self, anchor: usize) -> &[f64] {
        &self.features[anchor * self.dim..(anchor + 1) * self.dim]
    }
}

pub fn prepare_sample(
    scene: Scene,
    anchors: &AnchorSet,
    num_classes: usize,
    pos_thresh: f64,
    neg_thresh: f64,
    cfg: &FeatureConfig,
) -> Result<SceneSample> {
    if !(cfg.noise_min >= 0.0 && cfg.noise_max >= cfg.noise_min && cfg.noise_power > 0.0 && cfg.visibility_noise >= 0.0) {
        return Err(Error::Config(format!("invalid feature config {cfg:?}")));
    }
    let matching = match_anchors(anchors, &scene, pos_thresh, neg_thresh)?;
    let dim = feature_dim(num_classes);
    // stream 1 keeps feature noise independent of the scene layout draws
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(1);
    let (w, h) = (scene.bounds.w(), scene.bounds.h());
    let mut features = Vec::with_capacity(anchors.len() * dim);
    let mut targets = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.anchors.iter().enumerate() {
        features.push(1.0);
        features.extend_from_slice(&[
            (a.cx() - scene.bounds.x1) / w,
            (a.cy() - scene.bounds.y1) / h,
            a.w() / w,
            a.h() / h,
        ]);
        let (offsets, visibility, class_id) = match matching.best_object[i] {
            Some(k) => {
                let obj = &scene.objects[k];
                let sigma = cfg.noise_min + (cfg.noise_max - cfg.noise_min) * obj.difficulty.powf(cfg.noise_power);
                let clean = encode(a, &obj.bbox)?.to_array();
                let noisy = clean.map(|v| v + sigma * normal(&mut rng));
                let vis = 1.0 - obj.difficulty + cfg.visibility_noise * normal(&mut rng);
                (noisy, vis, Some(obj.class_id))
            }
            None => ([0.0; 4], 0.0, None),
        };
        features.extend_from_slice(&offsets);
        features.extend(offsets.iter().map(|v| v.abs()));
        features.push(visibility);
        if num_classes > 1 {
            features.extend((0..num_classes).map(|c| if Some(c) == class_id { 1.0 } else { 0.0 }));
        }
        targets.push(match matching.assignments[i] {
            Assignment::Positive(k) => Some(encode(a, &scene.objects[k].bbox)?),
            _ => None,
        });
    }
    Ok(SceneSample {
        scene,
        matching,
        features,
        dim,
        targets,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Linear classification and regression heads over the anchor features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dim: usize,
    pub num_classes: usize,
    /// Row-major `num_classes x dim`.
    pub cls: Vec<f64>,
    /// Row-major `4 x dim`, rows in (cx, cy, w, h) order.
    pub reg: Vec<f64>,
}

impl ToyModel {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            cls: vec![0.0; num_classes * dim],
            reg: vec![0.0; 4 * dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().chain(&self.reg).all(|v| v.is_finite())
    }

    pub fn logit(&self, features: &[f64], class: usize) -> f64 {
        dot(&self.cls[class * self.dim..(class + 1) * self.dim], features)
    }

    pub fn regress(&self, features: &[f64]) -> BoxDelta {
        BoxDelta::from_array(std::array::from_fn(|m| {
            dot(&self.reg[m * self.dim..(m + 1) * self.dim], features)
        }))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Decodes a predicted offset against its anchor, limiting the size terms
/// and clipping to the scene.
pub fn decode_prediction(anchor: &BBox, delta: &BoxDelta, bounds: &BBox) -> Result<BBox> {
    let limited = BoxDelta {
        dw: delta.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
        dh: delta.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE),
        ..*delta
    };
    Ok(clip_box(&decode(anchor, &limited)?, bounds))
}

/// IoU of a regressed positive against its object, after decoding and
/// clipping to the scene.
pub fn regressed_iou(anchor: &BBox, delta: &BoxDelta, target: &BBox, bounds: &BBox) -> Result<f64> {
    Ok(iou(&decode_prediction(anchor, delta, bounds)?, target))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveOutput {
    pub anchor: usize,
    pub object: usize,
    /// IoU of the decoded, clipped prediction against the matched object.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Row-major `anchors x classes`.
    pub logits: Vec<f64>,
    /// Clamped probabilities, same layout as `logits`.
    pub scores: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    pub positives: Vec<PositiveOutput>,
    pub num_classes: usize,
}

impl ForwardOutput {
    pub fn score(&self, anchor: usize, class: usize) -> f64 {
        self.scores[anchor * self.num_classes + class]
    }

    /// `d score / d logit`, zero where the clamp is active.
    pub fn score_slope(&self, anchor: usize, class: usize) -> f64 {
        let raw = sigmoid(self.logits[anchor * self.num_classes + class]);
        if !(SCORE_EPS..=1.0 - SCORE_EPS).contains(&raw) {
            0.0
        } else {
            raw * (1.0 - raw)
        }
    }
}

pub fn forward(model: &ToyModel, anchors: &AnchorSet, sample: &SceneSample) -> Result<ForwardOutput> {
    if model.dim != sample.dim {
        return Err(Error::Config(format!(
            "model expects {} features, sample has {}",
            model.dim, sample.dim
        )));
    }
    let k = model.num_classes;
    let n = anchors.len();
    let mut logits = Vec::with_capacity(n * k);
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        let f = sample.row(i);
        for c in 0..k {
            logits.push(model.logit(f, c));
        }
        deltas.push(model.regress(f));
    }
    let scores = logits.iter().map(|&z| clamp_score(sigmoid(z))).collect();
    let mut positives = Vec::new();
    for (i, object) in sample.matching.positives() {
        positives.push(PositiveOutput {
            anchor: i,
            object,
            iou: regressed_iou(
                &anchors.anchors[i],
                &deltas[i],
                &sample.scene.objects[object].bbox,
                &sample.scene.bounds,
            )?,
        });
    }
    Ok(ForwardOutput {
        logits,
        scores,
        deltas,
        positives,
        num_classes: k,
    })
}
