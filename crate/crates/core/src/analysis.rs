//! Gradient-norm curves under the Bounded-IoU weight, finite-difference
//! verification of the analytic gradients, and `w_loc` calibration.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{bounded_iou, BoundAxis, BoxDelta};
use crate::losses::{
    cls_grad, cross_entropy, loc_grad_with_weights, loc_loss_with_weights, smooth_l1, Label,
    PositiveExample, DEFAULT_DELTA,
};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Residuals this close to the smooth-L1 transition point are not checked.
pub const KINK_EXCLUSION: f64 = 1e-3;

/// Reference `(lambda, w_loc)` pairs from the published ablation, where
/// `w_loc` keeps the first-iteration localization sum unchanged.
pub const LOC_WEIGHT_PRESETS: [(f64, f64); 4] = [(0.5, 1.575), (1.0, 2.226), (1.5, 3.049), (1.8, 3.649)];

/// The eta values swept in the same ablation.
pub const ETA_PRESETS: [f64; 5] = [0.0, 1.0, 1.4, 1.5, 1.6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub w_loc: f64,
    pub delta: f64,
    pub axis: BoundAxis,
    pub d_min: f64,
    pub d_max: f64,
    pub n_points: usize,
}

impl CurveSpec {
    pub fn new(lambda_: f64, w_loc: f64, axis: BoundAxis) -> Self {
        Self {
            lambda_,
            w_loc,
            delta: DEFAULT_DELTA,
            axis,
            d_min: 0.0,
            d_max: 0.9,
            n_points: 91,
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::Config("curve needs at least 2 points".into()));
        }
        if !(self.d_max > self.d_min) || !self.d_min.is_finite() || !self.d_max.is_finite() {
            return Err(Error::Config(format!(
                "curve range [{}, {}] is empty",
                self.d_min, self.d_max
            )));
        }
        if !(self.delta > 0.0) || !(self.w_loc > 0.0) || !(self.lambda_ >= 0.0) {
            return Err(Error::Config(format!(
                "curve needs delta > 0, w_loc > 0, lambda >= 0; got {self:?}"
            )));
        }
        if self.axis == BoundAxis::Center && self.d_min.abs().max(self.d_max.abs()) >= 1.0 {
            return Err(domain(format!(
                "center-axis curve must stay inside |d| < 1, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let span = self.d_max - self.d_min;
        let last = (self.n_points - 1) as f64;
        (0..self.n_points).map(move |i| self.d_min + span * i as f64 / last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub d: f64,
    pub grad_norm: f64,
}

/// `|d(w * smoothL1)/dd|` where the weight's IoU is the Bounded-IoU of `d`
/// with matched target and anchor widths.
pub fn grad_norm_at(d: f64, axis: BoundAxis, lambda_: f64, w_loc: f64, delta: f64) -> Result<f64> {
    let bound = bounded_iou(d, axis, 1.0, 1.0)?;
    let weight = w_loc * bound.powf(lambda_);
    let slope = if d.abs() <= delta { d.abs() / delta } else { 1.0 };
    Ok(weight * slope)
}

pub fn gradient_norm_curve(spec: &CurveSpec) -> Result<Vec<CurvePoint>> {
    spec.validate()?;
    spec.grid()
        .map(|d| {
            Ok(CurvePoint {
                d,
                grad_norm: grad_norm_at(d, spec.axis, spec.lambda_, spec.w_loc, spec.delta)?,
            })
        })
        .collect()
}

/// Writes curves as CSV with columns `d,grad_norm,lambda,w_loc,axis`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[(CurveSpec, Vec<CurvePoint>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d", "grad_norm", "lambda", "w_loc", "axis"])?;
    for (spec, points) in curves {
        for p in points {
            w.write_record([
                p.d.to_string(),
                p.grad_norm.to_string(),
                spec.lambda_.to_string(),
                spec.w_loc.to_string(),
                spec.axis.as_str().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cls,
    Loc,
}

/// Where the largest disagreement was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub trial: usize,
    pub description: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub kind: LossKind,
    pub trials: usize,
    pub seed: u64,
    pub points_checked: usize,
    pub points_skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<WorstPoint>,
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

struct Tracker {
    max: f64,
    worst: Option<WorstPoint>,
    checked: usize,
    skipped: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, trial: usize, description: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if rel > self.max || self.worst.is_none() {
            self.max = self.max.max(rel);
            self.worst = Some(WorstPoint {
                trial,
                description: description(),
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
}

/// Compares analytic gradients with central differences on random inputs,
/// holding the IoU-derived weights fixed across each perturbation.
pub fn finite_diff_check(kind: LossKind, trial_count: usize, seed: u64) -> Result<GradCheckReport> {
    if trial_count == 0 {
        return Err(Error::Config("trial count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = Tracker::new();
    for trial in 0..trial_count {
        match kind {
            LossKind::Cls => check_cls_trial(&mut rng, trial, &mut tracker)?,
            LossKind::Loc => check_loc_trial(&mut rng, trial, &mut tracker)?,
        }
    }
    let passed = tracker.max <= FD_TOLERANCE;
    Ok(GradCheckReport {
        kind,
        trials: trial_count,
        seed,
        points_checked: tracker.checked,
        points_skipped: tracker.skipped,
        max_rel_error: tracker.max,
        tolerance: FD_TOLERANCE,
        passed,
        worst: tracker.worst,
    })
}

fn check_cls_trial(rng: &mut ChaCha8Rng, trial: usize, tracker: &mut Tracker) -> Result<()> {
    let p = rng.gen_range(0.01..0.99);
    let label = if rng.gen_bool(0.5) { Label::Positive } else { Label::Negative };
    // a quarter of the trials exercise zero weights
    let weight = if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.0..3.0) };
    let analytic = cls_grad(p, label, weight)?;
    let f = |x: f64| weight * cross_entropy(x, label).expect("perturbed probability in range");
    let numeric = central_difference(f, p, FD_STEP);
    tracker.record(
        trial,
        || format!("p={p}, label={label:?}, weight={weight}"),
        analytic,
        numeric,
    );
    Ok(())
}

fn check_loc_trial(rng: &mut ChaCha8Rng, trial: usize, tracker: &mut Tracker) -> Result<()> {
    let delta = if rng.gen_bool(0.5) { DEFAULT_DELTA } else { rng.gen_range(0.05..1.0) };
    let n = rng.gen_range(1..=8);
    let positives: Vec<PositiveExample> = (0..n)
        .map(|_| {
            let pred = BoxDelta::from_array(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
            let target = BoxDelta::from_array(std::array::from_fn(|_| rng.gen_range(-0.5..0.5)));
            PositiveExample {
                score: rng.gen_range(0.01..0.99),
                label: Label::Positive,
                pred_delta: pred,
                target_delta: target,
                iou: if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..=1.0) },
            }
        })
        .collect();
    let lambda = rng.gen_range(0.0..2.0);
    let w_loc = rng.gen_range(0.5..4.0);
    // weights evaluated once at the unperturbed point and frozen
    let weights: Vec<f64> = positives.iter().map(|p| w_loc * p.iou.powf(lambda)).collect();
    let analytic = loc_grad_with_weights(&positives, &weights, delta)?;
    for (i, grad) in analytic.iter().enumerate() {
        let alone = loc_grad_with_weights(&positives[i..=i], &weights[i..=i], delta)?;
        if alone[0] != *grad {
            return Err(Error::Domain(format!("gradient of example {i} depends on other examples")));
        }
    }

    for (i, grad) in analytic.iter().enumerate() {
        let residual = positives[i].residual().to_array();
        for m in 0..4 {
            if (residual[m].abs() - delta).abs() < KINK_EXCLUSION {
                tracker.skipped += 1;
                continue;
            }
            // the loss is a sum over examples, so only example i depends on x;
            // differencing its own term keeps roundoff proportional to its weight
            let f = |x: f64| {
                let mut perturbed = positives[i];
                let mut pred = perturbed.pred_delta.to_array();
                pred[m] = x;
                perturbed.pred_delta = BoxDelta::from_array(pred);
                loc_loss_with_weights(&[perturbed], &weights[i..=i], delta).expect("one weight per positive")
            };
            let x0 = positives[i].pred_delta.to_array()[m];
            let numeric = central_difference(f, x0, FD_STEP);
            tracker.record(
                trial,
                || format!("example {i}, coordinate {m}, residual={}, delta={delta}, weight={}", residual[m], weights[i]),
                grad.to_array()[m],
                numeric,
            );
        }
    }
    Ok(())
}

/// `w_loc` that makes the manual-mode weighted localization sum equal the
/// unweighted sum on the given batch.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn calibrate_w_loc(positives: &[PositiveExample], lambda_: f64, delta: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Calibration("calibration batch has no positives".into()));
    }
    let mut plain = 0.0;
    let mut weighted = 0.0;
    for p in positives {
        let raw = p.iou.powf(lambda_);
        for x in p.residual().to_array() {
            let l = smooth_l1(x, delta);
            plain += l;
            weighted += raw * l;
        }
    }
    if !(weighted > 0.0) || !(plain > 0.0) {
        return Err(Error::Calibration(format!(
            "degenerate calibration batch: unweighted sum {plain}, weighted sum {weighted}"
        )));
    }
    Ok(plain / weighted)
}
