//! Cross-entropy, smooth L1, and their IoU-balanced variants.
//!
//! Every IoU-derived weight is a constant with respect to the gradients:
//! weights are recomputed from the current regressed IoUs on each forward
//! pass, and the gradient functions take them as plain inputs.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::BoxDelta;

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before entering CE.
pub const SCORE_EPS: f64 = 1e-7;

/// Smooth-L1 transition point used throughout the gradient analysis.
pub const DEFAULT_DELTA: f64 = 0.111;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Negative => 0.0,
            Label::Positive => 1.0,
        }
    }
}

/// How localization weights are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocWeightMode {
    /// `w_loc * iou^lambda` with a fixed `w_loc`.
    Manual,
    /// `iou^lambda` rescaled so the batch localization sum is unchanged.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub eta: f64,
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub delta: f64,
    pub w_loc: f64,
    pub loc_weight_mode: LocWeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            lambda_: 0.0,
            delta: DEFAULT_DELTA,
            w_loc: 1.0,
            loc_weight_mode: LocWeightMode::Manual,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta.is_finite()
            && self.eta >= 0.0
            && self.lambda_.is_finite()
            && self.lambda_ >= 0.0
            && self.delta.is_finite()
            && self.delta > 0.0
            && self.w_loc.is_finite()
            && self.w_loc > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss config needs eta >= 0, lambda >= 0, delta > 0, w_loc > 0; got {self:?}"
            )))
        }
    }
}

/// One matched anchor's prediction and target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveExample {
    pub score: f64,
    pub label: Label,
    pub pred_delta: BoxDelta,
    pub target_delta: BoxDelta,
    /// IoU of the decoded prediction against its ground truth.
    pub iou: f64,
}

impl PositiveExample {
    pub fn residual(&self) -> BoxDelta {
        self.pred_delta - self.target_delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeExample {
    pub score: f64,
}

/// Side information from a weight computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    /// The normalizer's denominator was zero and all-ones weights were used.
    pub fell_back: bool,
    /// Positives whose IoU is exactly zero.
    pub zero_iou: usize,
}

impl WeightDiagnostics {
    pub fn merge(&mut self, other: WeightDiagnostics) {
        self.fell_back |= other.fell_back;
        self.zero_iou += other.zero_iou;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub values: Vec<f64>,
    pub diagnostics: WeightDiagnostics,
}

impl Weights {
    pub fn ones(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            diagnostics: WeightDiagnostics::default(),
        }
    }
}

pub fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn check_prob(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("probability {p} outside (0, 1)")))
    }
}

pub fn cross_entropy(p: f64, label: Label) -> Result<f64> {
    check_prob(p)?;
    Ok(match label {
        Label::Positive => -p.ln(),
        Label::Negative => -(1.0 - p).ln(),
    })
}

pub fn smooth_l1(x: f64, delta: f64) -> f64 {
    let ax = x.abs();
    if ax <= delta {
        x * x / (2.0 * delta)
    } else {
        ax - 0.5 * delta
    }
}

/// Derivative of [`smooth_l1`] with respect to `x`.
pub fn smooth_l1_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x / delta
    } else {
        x.signum()
    }
}

fn smooth_l1_sum(residual: BoxDelta, delta: f64) -> f64 {
    residual
        .to_array()
        .iter()
        .map(|&x| smooth_l1(x, delta))
        .sum()
}

fn ensure_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        Err(domain(format!("{what} must be nonempty")))
    } else {
        Ok(())
    }
}

fn check_iou(iou: f64) -> Result<()> {
    if (0.0..=1.0).contains(&iou) {
        Ok(())
    } else {
        Err(domain(format!("iou {iou} outside [0, 1]")))
    }
}

/// Rescales raw `iou^exponent` weights so that `sum(w * loss) == sum(loss)`.
fn normalized_weights(ious: &[f64], losses: &[f64], exponent: f64) -> Weights {
    let raw: Vec<f64> = ious.iter().map(|iou| iou.powf(exponent)).collect();
    let total: f64 = losses.iter().sum();
    let weighted: f64 = raw.iter().zip(losses).map(|(w, l)| w * l).sum();
    let zero_iou = ious.iter().filter(|&&v| v == 0.0).count();
    if weighted == 0.0 || !weighted.is_finite() {
        log::debug!("weight normalizer has zero denominator; using all-ones weights");
        return Weights {
            values: vec![1.0; ious.len()],
            diagnostics: WeightDiagnostics {
                fell_back: true,
                zero_iou,
            },
        };
    }
    let scale = total / weighted;
    Weights {
        values: raw.into_iter().map(|w| w * scale).collect(),
        diagnostics: WeightDiagnostics {
            fell_back: false,
            zero_iou,
        },
    }
}

/// Normalized IoU-balanced classification weights for the positives.
pub fn cls_weights(positives: &[PositiveExample], eta: f64) -> Result<Weights> {
    ensure_nonempty(positives, "positive set")?;
    let mut ious = Vec::with_capacity(positives.len());
    let mut ces = Vec::with_capacity(positives.len());
    for p in positives {
        check_iou(p.iou)?;
        ious.push(p.iou);
        ces.push(cross_entropy(p.score, Label::Positive)?);
    }
    Ok(normalized_weights(&ious, &ces, eta))
}

/// Classification loss with caller-supplied (frozen) positive weights.
pub fn cls_loss_with_weights(
    positives: &[PositiveExample],
    weights: &[f64],
    negatives: &[NegativeExample],
) -> Result<f64> {
    if weights.len() != positives.len() {
        return Err(domain("weight count does not match positive count"));
    }
    let mut total = 0.0;
    for (p, w) in positives.iter().zip(weights) {
        total += w * cross_entropy(p.score, p.label)?;
    }
    for n in negatives {
        total += cross_entropy(n.score, Label::Negative)?;
    }
    Ok(total)
}

/// IoU-balanced classification loss.
pub fn cls_loss(
    positives: &[PositiveExample],
    negatives: &[NegativeExample],
    cfg: &LossConfig,
) -> Result<f64> {
    let weights = cls_weights(positives, cfg.eta)?;
    cls_loss_with_weights(positives, &weights.values, negatives)
}

/// Unweighted cross-entropy over the same inputs.
pub fn standard_cls_loss(positives: &[PositiveExample], negatives: &[NegativeExample]) -> Result<f64> {
    let mut total = 0.0;
    for p in positives {
        total += cross_entropy(p.score, p.label)?;
    }
    for n in negatives {
        total += cross_entropy(n.score, Label::Negative)?;
    }
    Ok(total)
}

/// d(weight * CE(p, label)) / dp with the weight held constant.
pub fn cls_grad(p: f64, label: Label, weight: f64) -> Result<f64> {
    check_prob(p)?;
    let y = label.as_f64();
    Ok(weight * (-y / p + (1.0 - y) / (1.0 - p)))
}

pub fn loc_weights(positives: &[PositiveExample], cfg: &LossConfig) -> Result<Weights> {
    ensure_nonempty(positives, "positive set")?;
    for p in positives {
        check_iou(p.iou)?;
    }
    match cfg.loc_weight_mode {
        LocWeightMode::Manual => Ok(Weights {
            values: positives
                .iter()
                .map(|p| cfg.w_loc * p.iou.powf(cfg.lambda_))
                .collect(),
            diagnostics: WeightDiagnostics {
                fell_back: false,
                zero_iou: positives.iter().filter(|p| p.iou == 0.0).count(),
            },
        }),
        LocWeightMode::Normalized => {
            let ious: Vec<f64> = positives.iter().map(|p| p.iou).collect();
            let losses: Vec<f64> = positives
                .iter()
                .map(|p| smooth_l1_sum(p.residual(), cfg.delta))
                .collect();
            Ok(normalized_weights(&ious, &losses, cfg.lambda_))
        }
    }
}

/// Localization loss with caller-supplied (frozen) weights.
pub fn loc_loss_with_weights(positives: &[PositiveExample], weights: &[f64], delta: f64) -> Result<f64> {
    if weights.len() != positives.len() {
        return Err(domain("weight count does not match positive count"));
    }
    Ok(positives
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            p.residual()
                .to_array()
                .iter()
                .map(|&x| w * smooth_l1(x, delta))
                .sum::<f64>()
        })
        .sum())
}

pub fn loc_loss(positives: &[PositiveExample], cfg: &LossConfig) -> Result<f64> {
    let weights = loc_weights(positives, cfg)?;
    loc_loss_with_weights(positives, &weights.values, cfg.delta)
}

/// Unweighted smooth-L1 sum over all positives and coordinates.
pub fn standard_loc_loss(positives: &[PositiveExample], delta: f64) -> f64 {
    positives
        .iter()
        .map(|p| {
            p.residual()
                .to_array()
                .iter()
                .map(|&x| smooth_l1(x, delta))
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of the weighted smooth-L1 term w.r.t. the predicted offsets,
/// given frozen weights.
pub fn loc_grad_with_weights(positives: &[PositiveExample], weights: &[f64], delta: f64) -> Result<Vec<BoxDelta>> {
    if weights.len() != positives.len() {
        return Err(domain("weight count does not match positive count"));
    }
    Ok(positives
        .iter()
        .zip(weights)
        .map(|(p, &w)| {
            let r = p.residual().to_array();
            BoxDelta::from_array(r.map(|d| w * smooth_l1_grad(d, delta)))
        })
        .collect())
}

pub fn loc_grad(positives: &[PositiveExample], cfg: &LossConfig) -> Result<Vec<BoxDelta>> {
    let weights = loc_weights(positives, cfg)?;
    loc_grad_with_weights(positives, &weights.values, cfg.delta)
}
