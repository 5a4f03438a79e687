//! One SGD step on the linear heads with hand-written gradients.
//!
//! IoU-based weights come from the pre-step forward pass and are constants
//! inside the step; the objective is `(L_cls + L_loc) / num_positives`.

use serde::{Deserialize, Serialize};

use crate::analysis::calibrate_w_loc;
use crate::error::{Error, Result};
use crate::losses::{
    cls_grad, cls_loss_with_weights, cls_weights, loc_grad_with_weights, loc_loss_with_weights,
    loc_weights, Label, LocWeightMode, LossConfig, NegativeExample, PositiveExample,
    WeightDiagnostics, Weights,
};

use super::anchors::{AnchorConfig, AnchorSet, Assignment};
use super::model::{forward, FeatureConfig, ForwardOutput, SceneSample, ToyModel};
use super::scene::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// Standard CE + smooth L1 with unit weights, ignoring `loss`'s exponents.
    pub baseline: bool,
    /// Replace `loss.w_loc` by the value calibrated on the first batch
    /// (manual localization mode only).
    pub calibrate_w_loc: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenes per SGD step.
    pub batch_size: usize,
    pub seed: u64,
    pub scenes_count: usize,
    pub heldout_count: usize,
    pub pos_thresh: f64,
    pub neg_thresh: f64,
    pub scene: SceneConfig,
    pub anchors: AnchorConfig,
    pub features: FeatureConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            baseline: true,
            calibrate_w_loc: true,
            learning_rate: 0.02,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            scenes_count: 200,
            heldout_count: 100,
            pos_thresh: 0.5,
            neg_thresh: 0.4,
            scene: SceneConfig::default(),
            anchors: AnchorConfig::default(),
            features: FeatureConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.scene.validate()?;
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.scenes_count >= 1
            && self.heldout_count >= 1
            && (0.0..=1.0).contains(&self.eval.nms_thresh)
            && self.eval.max_detections >= 1;
        if !ok {
            return Err(Error::Config(
                "training needs learning_rate >= 0, epochs >= 1, batch_size >= 1, \
                 at least one training and one held-out scene, nms threshold in [0, 1]"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The IoU-balanced counterpart of this config with the given exponents.
    pub fn balanced(&self, eta: f64, lambda_: f64) -> Self {
        Self {
            baseline: false,
            loss: LossConfig {
                eta,
                lambda_,
                ..self.loss
            },
            ..self.clone()
        }
    }
}

/// Mutable training state carried across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: ToyModel,
    /// `w_loc` in use; fixed once calibrated.
    pub w_loc: f64,
    pub calibrated: bool,
    pub steps: usize,
}

impl TrainState {
    pub fn new(model: ToyModel, cfg: &TrainConfig) -> Self {
        Self {
            model,
            w_loc: cfg.loss.w_loc,
            calibrated: false,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepOutcome {
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub num_positives: usize,
    pub skipped: bool,
    pub diagnostics: WeightDiagnostics,
}

/// Per-example bookkeeping linking loss terms back to anchors.
struct BatchTerms {
    positives: Vec<PositiveExample>,
    /// (sample, anchor, class) of each positive.
    pos_index: Vec<(usize, usize, usize)>,
    negatives: Vec<NegativeExample>,
    neg_index: Vec<(usize, usize, usize)>,
}

fn collect_terms(batch: &[&SceneSample], outputs: &[ForwardOutput]) -> BatchTerms {
    let mut terms = BatchTerms {
        positives: Vec::new(),
        pos_index: Vec::new(),
        negatives: Vec::new(),
        neg_index: Vec::new(),
    };
    for (s, (sample, out)) in batch.iter().zip(outputs).enumerate() {
        let k = out.num_classes;
        let mut pos_iter = out.positives.iter();
        for (i, assignment) in sample.matching.assignments.iter().enumerate() {
            match assignment {
                Assignment::Positive(obj) => {
                    let p = pos_iter.next().expect("forward emits one entry per positive");
                    debug_assert_eq!(p.anchor, i);
                    let class = if k > 1 { sample.scene.objects[*obj].class_id } else { 0 };
                    terms.positives.push(PositiveExample {
                        score: out.score(i, class),
                        label: Label::Positive,
                        pred_delta: out.deltas[i],
                        target_delta: sample.targets[i].expect("positives carry targets"),
                        iou: p.iou,
                    });
                    terms.pos_index.push((s, i, class));
                    for c in (0..k).filter(|&c| c != class) {
                        terms.negatives.push(NegativeExample { score: out.score(i, c) });
                        terms.neg_index.push((s, i, c));
                    }
                }
                Assignment::Negative => {
                    for c in 0..k {
                        terms.negatives.push(NegativeExample { score: out.score(i, c) });
                        terms.neg_index.push((s, i, c));
                    }
                }
                Assignment::Ignore => {}
            }
        }
    }
    terms
}

/// Frozen weights for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    pub cls: Weights,
    pub loc: Weights,
}

fn step_weights(positives: &[PositiveExample], cfg: &TrainConfig, w_loc: f64) -> Result<StepWeights> {
    if cfg.baseline {
        return Ok(StepWeights {
            cls: Weights::ones(positives.len()),
            loc: Weights::ones(positives.len()),
        });
    }
    let loss = LossConfig { w_loc, ..cfg.loss };
    Ok(StepWeights {
        cls: cls_weights(positives, loss.eta)?,
        loc: loc_weights(positives, &loss)?,
    })
}

/// Gradient of the step objective with respect to the model parameters,
/// laid out like [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
}

fn gradient(
    model: &ToyModel,
    batch: &[&SceneSample],
    outputs: &[ForwardOutput],
    terms: &BatchTerms,
    weights: &StepWeights,
    delta: f64,
) -> Result<ModelGrad> {
    let dim = model.dim;
    let scale = 1.0 / terms.positives.len() as f64;
    let mut g = ModelGrad {
        cls: vec![0.0; model.cls.len()],
        reg: vec![0.0; model.reg.len()],
    };
    let mut add_cls = |s: usize, i: usize, c: usize, d_score: f64| {
        let d_logit = d_score * outputs[s].score_slope(i, c) * scale;
        if d_logit != 0.0 {
            let row = batch[s].row(i);
            for (gk, fk) in g.cls[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *gk += d_logit * fk;
            }
        }
    };
    for (p, (&(s, i, c), w)) in terms.positives.iter().zip(terms.pos_index.iter().zip(&weights.cls.values)) {
        add_cls(s, i, c, cls_grad(p.score, Label::Positive, *w)?);
    }
    for (n, &(s, i, c)) in terms.negatives.iter().zip(&terms.neg_index) {
        add_cls(s, i, c, cls_grad(n.score, Label::Negative, 1.0)?);
    }
    let loc = loc_grad_with_weights(&terms.positives, &weights.loc.values, delta)?;
    for (d, &(s, i, _)) in loc.iter().zip(&terms.pos_index) {
        let row = batch[s].row(i);
        for (m, dm) in d.to_array().into_iter().enumerate() {
            if dm == 0.0 {
                continue;
            }
            for (gk, fk) in g.reg[m * dim..(m + 1) * dim].iter_mut().zip(row) {
                *gk += dm * scale * fk;
            }
        }
    }
    Ok(g)
}

/// Step objective `(L_cls + L_loc) / num_positives` of `model` on `batch`
/// with the given frozen weights. Used to verify the analytic gradient.
pub fn frozen_objective(
    model: &ToyModel,
    anchors: &AnchorSet,
    batch: &[&SceneSample],
    weights: &StepWeights,
    delta: f64,
) -> Result<f64> {
    let outputs = batch
        .iter()
        .map(|s| forward(model, anchors, s))
        .collect::<Result<Vec<_>>>()?;
    let terms = collect_terms(batch, &outputs);
    let cls = cls_loss_with_weights(&terms.positives, &weights.cls.values, &terms.negatives)?;
    let loc = loc_loss_with_weights(&terms.positives, &weights.loc.values, delta)?;
    Ok((cls + loc) / terms.positives.len() as f64)
}

/// Everything computed at the pre-step point.
pub struct StepAnalysis {
    pub weights: StepWeights,
    pub grad: ModelGrad,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub num_positives: usize,
    pub zero_iou: usize,
}

/// Weights, losses and gradient at the current parameters, or `None` when
/// the batch has no positives. Calibrates `w_loc` on first use.
pub fn analyze_step(
    state: &mut TrainState,
    anchors: &AnchorSet,
    batch: &[&SceneSample],
    cfg: &TrainConfig,
) -> Result<Option<StepAnalysis>> {
    let outputs = batch
        .iter()
        .map(|s| forward(&state.model, anchors, s))
        .collect::<Result<Vec<_>>>()?;
    let terms = collect_terms(batch, &outputs);
    if terms.positives.is_empty() {
        return Ok(None);
    }
    let wants_calibration = !cfg.baseline
        && cfg.calibrate_w_loc
        && cfg.loss.loc_weight_mode == LocWeightMode::Manual;
    if wants_calibration && !state.calibrated {
        state.w_loc = calibrate_w_loc(&terms.positives, cfg.loss.lambda_, cfg.loss.delta)?;
        state.calibrated = true;
        log::debug!("calibrated w_loc = {}", state.w_loc);
    }
    let weights = step_weights(&terms.positives, cfg, state.w_loc)?;
    let cls_loss = cls_loss_with_weights(&terms.positives, &weights.cls.values, &terms.negatives)?;
    let loc_loss = loc_loss_with_weights(&terms.positives, &weights.loc.values, cfg.loss.delta)?;
    let grad = gradient(&state.model, batch, &outputs, &terms, &weights, cfg.loss.delta)?;
    Ok(Some(StepAnalysis {
        num_positives: terms.positives.len(),
        zero_iou: terms.positives.iter().filter(|p| p.iou == 0.0).count(),
        weights,
        grad,
        cls_loss,
        loc_loss,
    }))
}

/// One SGD step. Returns the pre-step loss values.
pub fn train_step(
    state: &mut TrainState,
    anchors: &AnchorSet,
    batch: &[&SceneSample],
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let Some(analysis) = analyze_step(state, anchors, batch, cfg)? else {
        log::debug!("batch without positives; step skipped");
        return Ok(StepOutcome {
            skipped: true,
            ..StepOutcome::default()
        });
    };
    let lr = cfg.learning_rate;
    for (p, g) in state.model.cls.iter_mut().zip(&analysis.grad.cls) {
        *p -= lr * g;
    }
    for (p, g) in state.model.reg.iter_mut().zip(&analysis.grad.reg) {
        *p -= lr * g;
    }
    state.steps += 1;
    let diagnostics = WeightDiagnostics {
        fell_back: analysis.weights.cls.diagnostics.fell_back || analysis.weights.loc.diagnostics.fell_back,
        zero_iou: analysis.zero_iou,
    };
    Ok(StepOutcome {
        cls_loss: analysis.cls_loss,
        loc_loss: analysis.loc_loss,
        num_positives: analysis.num_positives,
        skipped: false,
        diagnostics,
    })
}
