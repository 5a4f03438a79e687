use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

use super::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub stride: f64,
    /// `sqrt(w * h)` of each anchor shape.
    pub scales: Vec<f64>,
    /// `w / h` of each anchor shape.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 4.0,
            scales: vec![16.0, 24.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    pub grid_cells: usize,
}

impl AnchorSet {
    /// Anchors centred on a regular grid over `bounds`, cell-major, then
    /// scale, then ratio.
    pub fn grid(bounds: &BBox, cfg: &AnchorConfig) -> Result<Self> {
        let ok = cfg.stride > 0.0
            && !cfg.scales.is_empty()
            && !cfg.ratios.is_empty()
            && cfg.scales.iter().chain(&cfg.ratios).all(|&v| v > 0.0 && v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid anchor config {cfg:?}")));
        }
        let cols = (bounds.w() / cfg.stride).floor() as usize;
        let rows = (bounds.h() / cfg.stride).floor() as usize;
        let mut anchors = Vec::with_capacity(rows * cols * cfg.scales.len() * cfg.ratios.len());
        for r in 0..rows {
            for c in 0..cols {
                let cx = bounds.x1 + (c as f64 + 0.5) * cfg.stride;
                let cy = bounds.y1 + (r as f64 + 0.5) * cfg.stride;
                for &s in &cfg.scales {
                    for &ratio in &cfg.ratios {
                        let q = ratio.sqrt();
                        anchors.push(BBox::from_center(cx, cy, s * q, s / q));
                    }
                }
            }
        }
        Ok(Self {
            anchors,
            grid_cells: rows * cols,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "target")]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub assignments: Vec<Assignment>,
    /// Largest IoU of each anchor against any object (0 with no objects).
    pub max_iou: Vec<f64>,
    /// Object achieving `max_iou`, lowest index on ties; `None` with no objects.
    pub best_object: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.assignments.iter().enumerate().filter_map(|(i, a)| match a {
            Assignment::Positive(t) => Some((i, *t)),
            _ => None,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.positives().count()
    }
}

pub fn match_anchors(anchors: &AnchorSet, scene: &Scene, pos_thresh: f64, neg_thresh: f64) -> Result<MatchResult> {
    if !(0.0 <= neg_thresh && neg_thresh <= pos_thresh && pos_thresh <= 1.0) {
        return Err(Error::Config(format!(
            "matching thresholds need 0 <= neg ({neg_thresh}) <= pos ({pos_thresh}) <= 1"
        )));
    }
    let n = anchors.len();
    let mut assignments = Vec::with_capacity(n);
    let mut max_iou = Vec::with_capacity(n);
    let mut best_object = Vec::with_capacity(n);
    for a in &anchors.anchors {
        let mut best: Option<(usize, f64)> = None;
        for (k, o) in scene.objects.iter().enumerate() {
            let v = iou(a, &o.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        let m = best.map_or(0.0, |(_, v)| v);
        let assignment = match best {
            Some((k, v)) if v >= pos_thresh => Assignment::Positive(k),
            _ if m < neg_thresh => Assignment::Negative,
            _ => Assignment::Ignore,
        };
        assignments.push(assignment);
        max_iou.push(m);
        best_object.push(best.map(|(k, _)| k));
    }
    Ok(MatchResult {
        assignments,
        max_iou,
        best_object,
    })
}
