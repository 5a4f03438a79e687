use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{
    coco_ap_images, nms, positive_score_iou_correlation, score_iou_stats, ApTable, Detection,
    EvalImage, GroundTruth, ScoreIouStats,
};

use super::anchors::AnchorSet;
use super::model::{decode_prediction, feature_dim, forward, prepare_sample, SceneSample, ToyModel};
use super::scene::generate_scene;
use super::train::{train_step, TrainConfig, TrainState};

/// Seed of the `index`-th scene of a split. Training scenes use even
/// indices and held-out scenes odd ones, so the splits never share a seed.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer: a bijection of `base + index * golden`
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn training_seed(base: u64, i: usize) -> u64 {
    scene_seed(base, 2 * i as u64)
}

pub fn heldout_seed(base: u64, i: usize) -> u64 {
    scene_seed(base, 2 * i as u64 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean per-step classification loss (IoU-weighted where enabled).
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub steps: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub skipped_steps: usize,
    /// Steps where a weight normalizer fell back to all-ones weights.
    pub fallback_steps: usize,
    /// Positives with zero regressed IoU, summed over all steps.
    pub zero_iou_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    /// `w_loc` used by the localization weights (1 for the baseline).
    pub w_loc: f64,
    pub epochs: Vec<EpochSummary>,
    pub diagnostics: TrainDiagnostics,
    pub ap_table: ApTable,
    /// Statistics over post-NMS detections.
    pub score_iou: ScoreIouStats,
    pub score_iou_pre_nms: ScoreIouStats,
    /// Spearman(score, IoU) over post-NMS detections with IoU >= 0.5.
    pub spearman: Option<f64>,
    pub spearman_pre_nms: Option<f64>,
    pub model: ToyModel,
    /// Held-out scenes with their post-NMS detections.
    pub images: Vec<EvalImage>,
}

impl ExperimentReport {
    pub fn write_epochs_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "cls_loss", "loc_loss", "steps", "skipped"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.cls_loss.to_string(),
                e.loc_loss.to_string(),
                e.steps.to_string(),
                e.skipped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn build_samples(
    cfg: &TrainConfig,
    anchors: &AnchorSet,
    seed_of: impl Fn(usize) -> u64,
    count: usize,
) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let scene = generate_scene(seed_of(i), &cfg.scene)?;
            prepare_sample(
                scene,
                anchors,
                cfg.scene.num_classes,
                cfg.pos_thresh,
                cfg.neg_thresh,
                &cfg.features,
            )
        })
        .collect()
}

/// Decoded detections of one scene before and after NMS.
pub fn detect(model: &ToyModel, anchors: &AnchorSet, sample: &SceneSample, cfg: &TrainConfig) -> Result<(EvalImage, EvalImage)> {
    let out = forward(model, anchors, sample)?;
    let mut dets = Vec::new();
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        for c in 0..model.num_classes {
            let score = out.score(i, c);
            if score < cfg.eval.score_thresh {
                continue;
            }
            let bbox = decode_prediction(anchor, &out.deltas[i], &sample.scene.bounds)?;
            dets.push(Detection {
                bbox,
                score,
                class_id: c,
            });
        }
    }
    let ground_truth: Vec<GroundTruth> = sample
        .scene
        .objects
        .iter()
        .map(|o| GroundTruth {
            bbox: o.bbox,
            class_id: if model.num_classes > 1 { o.class_id } else { 0 },
        })
        .collect();
    let mut kept = nms(&dets, cfg.eval.nms_thresh);
    kept.truncate(cfg.eval.max_detections);
    Ok((
        EvalImage {
            detections: dets,
            ground_truth: ground_truth.clone(),
        },
        EvalImage {
            detections: kept,
            ground_truth,
        },
    ))
}

/// Trains on `scenes_count` generated scenes and evaluates on a disjoint
/// held-out split. Deterministic for a fixed config.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let anchors = AnchorSet::grid(&cfg.scene.bounds(), &cfg.anchors)?;
    let train = build_samples(cfg, &anchors, |i| training_seed(cfg.seed, i), cfg.scenes_count)?;
    let heldout = build_samples(cfg, &anchors, |i| heldout_seed(cfg.seed, i), cfg.heldout_count)?;

    let model = ToyModel::zeros(feature_dim(cfg.scene.num_classes), cfg.scene.num_classes);
    let mut state = TrainState::new(model, cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut diagnostics = TrainDiagnostics::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut cls_sum, mut loc_sum, mut steps, mut skipped) = (0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &train[i]).collect();
            let outcome = train_step(&mut state, &anchors, &batch, cfg)?;
            if outcome.skipped {
                skipped += 1;
                continue;
            }
            steps += 1;
            cls_sum += outcome.cls_loss;
            loc_sum += outcome.loc_loss;
            diagnostics.fallback_steps += usize::from(outcome.diagnostics.fell_back);
            diagnostics.zero_iou_positives += outcome.diagnostics.zero_iou;
        }
        diagnostics.skipped_steps += skipped;
        let denom = steps.max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            cls_loss: cls_sum / denom,
            loc_loss: loc_sum / denom,
            steps,
            skipped,
        });
    }

    let mut pre = Vec::with_capacity(heldout.len());
    let mut post = Vec::with_capacity(heldout.len());
    for sample in &heldout {
        let (a, b) = detect(&state.model, &anchors, sample, cfg)?;
        pre.push(a);
        post.push(b);
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        w_loc: if cfg.baseline { 1.0 } else { state.w_loc },
        epochs,
        diagnostics,
        ap_table: coco_ap_images(&post),
        score_iou: score_iou_stats(&post),
        score_iou_pre_nms: score_iou_stats(&pre),
        spearman: positive_score_iou_correlation(&post, 0.5),
        spearman_pre_nms: positive_score_iou_correlation(&pre, 0.5),
        model: state.model,
        images: post,
    })
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub ap_table: ApTable,
    pub spearman: Option<f64>,
    pub w_loc: f64,
}

impl RunSummary {
    fn of(report: &ExperimentReport) -> Self {
        Self {
            seed: report.config.seed,
            ap_table: report.ap_table.clone(),
            spearman: report.spearman,
            w_loc: report.w_loc,
        }
    }
}

/// Treatment minus baseline for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap80: f64,
    pub ap90: f64,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: Vec<RunSummary>,
    pub treatment: Vec<RunSummary>,
    pub deltas: Vec<PairedDelta>,
    pub mean_delta: PairedDelta,
}

impl ComparisonReport {
    /// CSV with columns `seed,d_ap,d_ap50,d_ap75,d_ap80,d_ap90,d_spearman`;
    /// the last row (seed `mean`) holds the seed means.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seed", "d_ap", "d_ap50", "d_ap75", "d_ap80", "d_ap90", "d_spearman"])?;
        let fmt = |seed: String, d: &PairedDelta| {
            vec![
                seed,
                d.ap.to_string(),
                d.ap50.to_string(),
                d.ap75.to_string(),
                d.ap80.to_string(),
                d.ap90.to_string(),
                d.spearman.map(|v| v.to_string()).unwrap_or_default(),
            ]
        };
        for d in &self.deltas {
            w.write_record(fmt(d.seed.to_string(), d))?;
        }
        w.write_record(fmt("mean".into(), &self.mean_delta))?;
        w.flush()?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs `baseline` and `treatment` on the same seeds and pairs the results.
/// Seeds run in parallel; results are ordered by seed position.
pub fn compare(baseline: &TrainConfig, treatment: &TrainConfig, seeds: &[u64]) -> Result<ComparisonReport> {
    let runs: Vec<(ExperimentReport, ExperimentReport)> = seeds
        .par_iter()
        .map(|&seed| {
            let b = run_experiment(&TrainConfig { seed, ..baseline.clone() })?;
            let t = run_experiment(&TrainConfig { seed, ..treatment.clone() })?;
            Ok((b, t))
        })
        .collect::<Result<_>>()?;
    let deltas: Vec<PairedDelta> = runs
        .iter()
        .map(|(b, t)| PairedDelta {
            seed: b.config.seed,
            ap: t.ap_table.mean - b.ap_table.mean,
            ap50: t.ap_table.ap50 - b.ap_table.ap50,
            ap75: t.ap_table.ap75 - b.ap_table.ap75,
            ap80: t.ap_table.ap80 - b.ap_table.ap80,
            ap90: t.ap_table.ap90 - b.ap_table.ap90,
            spearman: t.spearman.zip(b.spearman).map(|(x, y)| x - y),
        })
        .collect();
    let spearmans: Vec<f64> = deltas.iter().filter_map(|d| d.spearman).collect();
    let mean_delta = PairedDelta {
        seed: 0,
        ap: mean(deltas.iter().map(|d| d.ap)),
        ap50: mean(deltas.iter().map(|d| d.ap50)),
        ap75: mean(deltas.iter().map(|d| d.ap75)),
        ap80: mean(deltas.iter().map(|d| d.ap80)),
        ap90: mean(deltas.iter().map(|d| d.ap90)),
        spearman: (!spearmans.is_empty()).then(|| mean(spearmans.iter().copied())),
    };
    Ok(ComparisonReport {
        baseline: runs.iter().map(|(b, _)| RunSummary::of(b)).collect(),
        treatment: runs.iter().map(|(_, t)| RunSummary::of(t)).collect(),
        deltas,
        mean_delta,
    })
}
