//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --release --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iou_balanced::analysis::{
    central_difference, finite_diff_check, grad_norm_at, relative_error, LossKind, FD_TOLERANCE, LOC_WEIGHT_PRESETS,
};
use iou_balanced::evaluation::ap_at_threshold;
use iou_balanced::geometry::{bounded_iou, BoundAxis, BoxDelta};
use iou_balanced::losses::{
    cls_loss, cls_weights, cross_entropy, loc_loss, loc_weights, smooth_l1, standard_cls_loss, standard_loc_loss,
    Label, LocWeightMode, LossConfig, NegativeExample, PositiveExample, DEFAULT_DELTA,
};
use iou_balanced::simulator::experiment::{compare, run_experiment, ComparisonReport, ExperimentReport};
use iou_balanced::simulator::model::prepare_sample;
use iou_balanced::simulator::train::{analyze_step, frozen_objective};
use iou_balanced::simulator::{generate_scene, AnchorSet, ToyModel, TrainConfig, TrainState};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn random_positives(rng: &mut ChaCha8Rng, n: usize) -> Vec<PositiveExample> {
    (0..n)
        .map(|_| PositiveExample {
            score: rng.gen_range(0.001..0.999),
            label: Label::Positive,
            pred_delta: BoxDelta::from_array(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
            target_delta: BoxDelta::from_array(std::array::from_fn(|_| rng.gen_range(-0.5..0.5))),
            iou: rng.gen_range(0.01..=1.0),
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn normalization_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let exponents = [0.5, 1.0, 1.5, 2.0];
    let sets = 1000;
    let mut worst_cls: f64 = 0.0;
    let mut worst_loc: f64 = 0.0;
    for s in 0..sets {
        let n = rng.gen_range(1..=64);
        let positives = random_positives(&mut rng, n);
        let exp = exponents[s % exponents.len()];

        let ce: Vec<f64> = positives.iter().map(|p| cross_entropy(p.score, Label::Positive).unwrap()).collect();
        let w = cls_weights(&positives, exp).unwrap();
        let weighted: f64 = w.values.iter().zip(&ce).map(|(w, c)| w * c).sum();
        worst_cls = worst_cls.max(rel(weighted, ce.iter().sum()));

        let cfg = LossConfig {
            lambda_: exp,
            loc_weight_mode: LocWeightMode::Normalized,
            ..LossConfig::default()
        };
        let w = loc_weights(&positives, &cfg).unwrap();
        let mut plain = 0.0;
        let mut weighted = 0.0;
        for (p, w) in positives.iter().zip(&w.values) {
            let l: f64 = p.residual().to_array().iter().map(|&x| smooth_l1(x, cfg.delta)).sum();
            plain += l;
            weighted += w * l;
        }
        worst_loc = worst_loc.max(rel(weighted, plain));
    }
    (
        worst_cls <= 1e-9 && worst_loc <= 1e-9,
        format!("{sets} sets, max relative drift cls {worst_cls:.2e}, loc {worst_loc:.2e} (limit 1e-9)"),
    )
}

fn same_run(a: &ExperimentReport, b: &ExperimentReport) -> bool {
    let bits = |m: &ToyModel| m.cls.iter().chain(&m.reg).map(|v| v.to_bits()).collect::<Vec<_>>();
    bits(&a.model) == bits(&b.model)
        && a.epochs == b.epochs
        && a.ap_table == b.ap_table
        && a.images == b.images
        && a.score_iou == b.score_iou
        && a.spearman.map(f64::to_bits) == b.spearman.map(f64::to_bits)
}

fn reduction_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let identity = LossConfig::default();
    let mut mismatches = 0;
    let cases = 1000;
    for _ in 0..cases {
        let n = rng.gen_range(1..=32);
        let positives = random_positives(&mut rng, n);
        let negatives: Vec<NegativeExample> = (0..rng.gen_range(0..32))
            .map(|_| NegativeExample { score: rng.gen_range(0.001..0.999) })
            .collect();
        let a = cls_loss(&positives, &negatives, &identity).unwrap();
        let b = standard_cls_loss(&positives, &negatives).unwrap();
        let c = loc_loss(&positives, &identity).unwrap();
        let d = standard_loc_loss(&positives, identity.delta);
        if a.to_bits() != b.to_bits() || c.to_bits() != d.to_bits() {
            mismatches += 1;
        }
    }
    let baseline = TrainConfig::default();
    let mut balanced = baseline.balanced(0.0, 0.0);
    balanced.calibrate_w_loc = false;
    balanced.loss.w_loc = 1.0;
    let b = run_experiment(&baseline).unwrap();
    let t = run_experiment(&balanced).unwrap();
    let trainer_same = same_run(&b, &t);
    (
        mismatches == 0 && trainer_same,
        format!("{cases} loss cases, {mismatches} bit mismatches; trainer bit-identical: {trainer_same}"),
    )
}

/// Analytic head gradient of the full training objective against central
/// differences, weights frozen.
fn head_gradient_error() -> (f64, usize) {
    let cfg = TrainConfig::default().balanced(1.5, 1.5);
    let anchors = AnchorSet::grid(&cfg.scene.bounds(), &cfg.anchors).unwrap();
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for seed in 0..2u64 {
        let scene = generate_scene(seed, &cfg.scene).unwrap();
        let sample = prepare_sample(scene, &anchors, 1, cfg.pos_thresh, cfg.neg_thresh, &cfg.features).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ToyModel::zeros(sample.dim, 1);
        for v in model.cls.iter_mut().chain(model.reg.iter_mut()) {
            *v = rng.gen_range(-0.3..0.3);
        }
        let mut state = TrainState::new(model.clone(), &cfg);
        let a = analyze_step(&mut state, &anchors, &[&sample], &cfg).unwrap().unwrap();
        let f = |m: &ToyModel| frozen_objective(m, &anchors, &[&sample], &a.weights, cfg.loss.delta).unwrap();
        for k in 0..model.cls.len() + model.reg.len() {
            let (analytic, x0) = if k < model.cls.len() {
                (a.grad.cls[k], model.cls[k])
            } else {
                (a.grad.reg[k - model.cls.len()], model.reg[k - model.cls.len()])
            };
            let numeric = central_difference(
                |x| {
                    let mut m = model.clone();
                    if k < m.cls.len() {
                        m.cls[k] = x;
                    } else {
                        let j = k - m.cls.len();
                        m.reg[j] = x;
                    }
                    f(&m)
                },
                x0,
                1e-6,
            );
            worst = worst.max(relative_error(analytic, numeric));
            points += 1;
        }
    }
    (worst, points)
}

fn gradient_correctness() -> Outcome {
    let cls = finite_diff_check(LossKind::Cls, 200, 303).unwrap();
    let loc = finite_diff_check(LossKind::Loc, 200, 303).unwrap();
    let (head, head_points) = head_gradient_error();
    let ok = cls.passed
        && loc.passed
        && cls.points_checked >= 100
        && loc.points_checked >= 100
        && head <= FD_TOLERANCE;
    (
        ok,
        format!(
            "cls {} pts max {:.2e}; loc {} pts ({} kink skips) max {:.2e}; detector head {} pts max {:.2e} (limit 1e-4)",
            cls.points_checked, cls.max_rel_error, loc.points_checked, loc.points_skipped, loc.max_rel_error, head_points, head
        ),
    )
}

fn gradient_norm_curves() -> Outcome {
    let delta = DEFAULT_DELTA;
    let mut failures = Vec::new();
    let base = |d: f64, axis| grad_norm_at(d, axis, 0.0, 1.0, delta).unwrap();
    for (lambda, w_loc) in LOC_WEIGHT_PRESETS {
        let g = |d: f64, axis| grad_norm_at(d, axis, lambda, w_loc, delta).unwrap();
        for axis in [BoundAxis::Center, BoundAxis::Size] {
            for at in [delta, -delta] {
                let across = if at > 0.0 { at.next_up() } else { at.next_down() };
                let jump = (g(at, axis) - g(across, axis)).abs();
                if jump > 1e-9 {
                    failures.push(format!("({lambda},{w_loc}) {axis:?} jump {jump:.2e} at {at}"));
                }
            }
            if g(0.05, axis) <= base(0.05, axis) {
                failures.push(format!("({lambda},{w_loc}) {axis:?} not above baseline at 0.05"));
            }
        }
        if g(0.9, BoundAxis::Center) >= base(0.9, BoundAxis::Center) {
            failures.push(format!("({lambda},{w_loc}) not below baseline at 0.9"));
        }
    }
    let spot = grad_norm_at(0.5, BoundAxis::Center, 1.0, 2.226, delta).unwrap();
    if (spot - 0.742).abs() > 1e-6 {
        failures.push(format!("spot value {spot}"));
    }
    let detail = if failures.is_empty() {
        format!("4 presets continuous at |d|=delta, above baseline at 0.05, below at 0.9; spot value {spot:.9}")
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let thresholds = iou_balanced::evaluation::coco_thresholds();
    let instances = 2000;
    let mut mismatches = 0;
    let mut nontrivial = 0;
    for i in 0..instances {
        let classes = if i % 4 == 0 { 2 } else { 1 };
        let (dets, gts) = common::random_instance(&mut rng, classes);
        let thr = thresholds[rng.gen_range(0..thresholds.len())];
        let got = ap_at_threshold(&dets, &gts, thr);
        let want = common::brute_force_ap(&dets, &gts, thr);
        if got.to_bits() != want.to_bits() {
            mismatches += 1;
        }
        if got > 0.0 && got < 1.0 {
            nontrivial += 1;
        }
    }
    (
        mismatches == 0,
        format!("{instances} instances ({nontrivial} with 0 < AP < 1), {mismatches} mismatches"),
    )
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_spearman(r: &ComparisonReport, treatment: bool) -> f64 {
    let runs = if treatment { &r.treatment } else { &r.baseline };
    mean(runs.iter().map(|s| s.spearman.unwrap_or(f64::NAN)))
}

fn mechanism_reproduction() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let baseline = TrainConfig::default();
    let eta = compare(&baseline, &baseline.balanced(1.5, 0.0), &seeds).unwrap();
    let lambda = compare(&baseline, &baseline.balanced(0.0, 1.5), &seeds).unwrap();
    let s_base = mean_spearman(&eta, false);
    let s_eta = mean_spearman(&eta, true);
    let d = &lambda.mean_delta;
    let ok_eta = s_eta > s_base;
    let ok_lambda = d.ap80 > 0.0 && d.ap90 > 0.0 && d.ap50.abs() < d.ap90;
    (
        ok_eta && ok_lambda,
        format!(
            "{} seeds; eta=1.5 spearman {s_eta:.4} vs {s_base:.4}; lambda=1.5 (w_loc calibrated) dAP50 {:+.4} dAP80 {:+.4} dAP90 {:+.4}",
            seeds.len(),
            d.ap50,
            d.ap80,
            d.ap90
        ),
    )
}

fn bounded_iou_upper_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let trials = 4000;
    let mut violations = 0;
    let mut max_gap: f64 = 0.0;
    let mut zero_exact = true;
    for t in 0..trials {
        let c = [
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(1.0..40.0),
            rng.gen_range(1.0..40.0),
        ];
        let coord = t % 4;
        let w_s = rng.gen_range(1.0..40.0);
        let extent = if coord == 0 { c[2] } else { c[3] };
        let d = match coord {
            0 | 1 => rng.gen_range(-1.0..=1.0) * extent / w_s,
            _ => rng.gen_range(-3.0..3.0),
        };
        let (geo, axis, extent) = common::single_coordinate_iou(c, coord, d, w_s);
        let bound = bounded_iou(d, axis, extent, w_s).unwrap();
        if bound < geo - 1e-12 {
            violations += 1;
        }
        max_gap = max_gap.max(geo - bound);
        let (geo0, axis0, extent0) = common::single_coordinate_iou(c, coord, 0.0, w_s);
        zero_exact &= bounded_iou(0.0, axis0, extent0, w_s).unwrap() == geo0;
    }
    (
        violations == 0 && zero_exact,
        format!("{trials} perturbations, {violations} violations (max iou - bound {max_gap:.1e}); equality at d=0: {zero_exact}"),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("normalization identities", normalization_identities, Some(Duration::from_secs(10))),
        ("reduction equivalence", reduction_equivalence, None),
        ("gradient correctness", gradient_correctness, Some(Duration::from_secs(10))),
        ("gradient-norm curves", gradient_norm_curves, None),
        ("AP oracle equivalence", ap_oracle, None),
        ("directional mechanism reproduction", mechanism_reproduction, Some(Duration::from_secs(300))),
        ("Bounded-IoU upper bound", bounded_iou_upper_bound, None),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (mut ok, mut detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            if elapsed > *limit {
                ok = false;
                detail.push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {detail} ({:.2}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
