//! Greedy NMS, COCO-style average precision, and score/IoU statistics.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

/// Detections and ground truth belonging to one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Number of recall points in the interpolated precision average.
pub const RECALL_POINTS: usize = 101;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Class-aware greedy NMS. Output is sorted by descending score; equal
/// scores keep their input order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(by_score_desc);
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let kept = order[i];
        keep.push(kept);
        for j in i + 1..order.len() {
            if !suppressed[j]
                && order[j].class_id == kept.class_id
                && iou(&kept.bbox, &order[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy-by-rank matching inside one image for one class. Returns a TP
/// flag per detection index (in the given order).
fn match_image(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from rank-ordered TP flags.
pub(crate) fn interpolated_ap(tp_in_rank_order: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp_in_rank_order.len());
    let mut recall = Vec::with_capacity(tp_in_rank_order.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_in_rank_order.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP result together with whether the empty-input convention was used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApValue {
    pub ap: f64,
    /// No ground truth and no detections anywhere; `ap` is 1 by convention.
    pub vacuous: bool,
}

fn class_ids(images: &[EvalImage]) -> (BTreeSet<usize>, bool) {
    let gt_classes: BTreeSet<usize> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| g.class_id))
        .collect();
    let any_det = images.iter().any(|im| !im.detections.is_empty());
    (gt_classes, any_det)
}

/// AP for one class across images.
fn class_ap(images: &[EvalImage], class_id: usize, iou_thresh: f64) -> f64 {
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for im in images {
        let mut dets: Vec<&Detection> = im.detections.iter().filter(|d| d.class_id == class_id).collect();
        dets.sort_by(|a, b| by_score_desc(a, b));
        let gts: Vec<&GroundTruth> = im.ground_truth.iter().filter(|g| g.class_id == class_id).collect();
        num_gt += gts.len();
        let flags = match_image(&dets, &gts, iou_thresh);
        ranked.extend(dets.iter().zip(flags).map(|(d, f)| (d.score, f)));
    }
    // stable: ties keep image order, then in-image rank
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let flags: Vec<bool> = ranked.into_iter().map(|(_, f)| f).collect();
    interpolated_ap(&flags, num_gt)
}

/// AP at one IoU threshold over several images, averaged over the classes
/// that have ground truth.
pub fn ap_at_threshold_images(images: &[EvalImage], iou_thresh: f64) -> ApValue {
    let (classes, any_det) = class_ids(images);
    if classes.is_empty() {
        return ApValue {
            ap: if any_det { 0.0 } else { 1.0 },
            vacuous: !any_det,
        };
    }
    let total: f64 = classes.iter().map(|&c| class_ap(images, c, iou_thresh)).sum();
    ApValue {
        ap: total / classes.len() as f64,
        vacuous: false,
    }
}

/// Single-image AP at one IoU threshold.
pub fn ap_at_threshold(dets: &[Detection], ground_truth: &[GroundTruth], iou_thresh: f64) -> f64 {
    let image = EvalImage {
        detections: dets.to_vec(),
        ground_truth: ground_truth.to_vec(),
    };
    ap_at_threshold_images(std::slice::from_ref(&image), iou_thresh).ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub mean: f64,
    pub ap50: f64,
    pub ap60: f64,
    pub ap70: f64,
    pub ap75: f64,
    pub ap80: f64,
    pub ap90: f64,
    /// Set when there was neither ground truth nor any detection.
    pub vacuous: bool,
}

impl ApTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.ap[i])
    }

    /// CSV with columns `threshold,ap`; the last row holds the mean.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "ap"])?;
        for (t, ap) in self.thresholds.iter().zip(&self.ap) {
            w.write_record([format!("{t:.2}"), ap.to_string()])?;
        }
        w.write_record(["mean".to_string(), self.mean.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

pub fn coco_ap_images(images: &[EvalImage]) -> ApTable {
    let thresholds = coco_thresholds();
    let values: Vec<ApValue> = thresholds.iter().map(|&t| ap_at_threshold_images(images, t)).collect();
    let ap: Vec<f64> = values.iter().map(|v| v.ap).collect();
    let mean = ap.iter().sum::<f64>() / ap.len() as f64;
    let pick = |k: usize| ap[k];
    ApTable {
        mean,
        ap50: pick(0),
        ap60: pick(2),
        ap70: pick(4),
        ap75: pick(5),
        ap80: pick(6),
        ap90: pick(8),
        vacuous: values.iter().any(|v| v.vacuous),
        thresholds,
        ap,
    }
}

pub fn coco_ap(dets: &[Detection], ground_truth: &[GroundTruth]) -> ApTable {
    coco_ap_images(&[EvalImage {
        detections: dets.to_vec(),
        ground_truth: ground_truth.to_vec(),
    }])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    /// NaN for an empty bin.
    pub mean_score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreIouStats {
    /// Non-empty bins only, in increasing IoU order.
    pub bins: Vec<ScoreBin>,
    /// Fraction of all detections whose IoU is strictly above each threshold.
    /// Empty when there are no detections.
    pub exceedance: Vec<Exceedance>,
    pub detection_count: usize,
}

impl ScoreIouStats {
    pub fn bin_mean(&self, bin_lo: f64) -> Option<f64> {
        self.bins
            .iter()
            .find(|b| (b.bin_lo - bin_lo).abs() < 1e-9)
            .map(|b| b.mean_score)
    }

    pub fn exceedance_at(&self, threshold: f64) -> Option<f64> {
        self.exceedance
            .iter()
            .find(|e| (e.threshold - threshold).abs() < 1e-9)
            .map(|e| e.fraction)
    }

    /// CSV with columns `bin_lo,bin_hi,mean_score,count`.
    pub fn write_bins_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "mean_score", "count"])?;
        for b in &self.bins {
            w.write_record([
                format!("{:.2}", b.bin_lo),
                format!("{:.2}", b.bin_hi),
                if b.count == 0 { String::new() } else { b.mean_score.to_string() },
                b.count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with columns `threshold,fraction`.
    pub fn write_exceedance_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "fraction"])?;
        for e in &self.exceedance {
            w.write_record([format!("{:.2}", e.threshold), e.fraction.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Best same-class ground-truth IoU of every detection, paired with its score.
pub fn detection_ious(images: &[EvalImage]) -> Vec<(f64, f64)> {
    images
        .iter()
        .flat_map(|im| {
            im.detections.iter().map(move |d| {
                let best = im
                    .ground_truth
                    .iter()
                    .filter(|g| g.class_id == d.class_id)
                    .map(|g| iou(&d.bbox, &g.bbox))
                    .fold(0.0, f64::max);
                (d.score, best)
            })
        })
        .collect()
}

const BIN_COUNT: usize = 10;

fn bin_index(v: f64) -> Option<usize> {
    if v < 0.5 {
        return None;
    }
    (0..BIN_COUNT).rev().find(|&k| v >= (50 + 5 * k) as f64 / 100.0)
}

pub fn score_iou_stats(images: &[EvalImage]) -> ScoreIouStats {
    let pairs = detection_ious(images);
    let mut sums = [0.0; BIN_COUNT];
    let mut counts = [0usize; BIN_COUNT];
    for &(score, v) in &pairs {
        if let Some(k) = bin_index(v) {
            sums[k] += score;
            counts[k] += 1;
        }
    }
    let bins = (0..BIN_COUNT)
        .filter(|&k| counts[k] > 0)
        .map(|k| ScoreBin {
            bin_lo: (50 + 5 * k) as f64 / 100.0,
            bin_hi: (55 + 5 * k) as f64 / 100.0,
            mean_score: sums[k] / counts[k] as f64,
            count: counts[k],
        })
        .collect();
    let exceedance = if pairs.is_empty() {
        Vec::new()
    } else {
        coco_thresholds()
            .into_iter()
            .map(|t| Exceedance {
                threshold: t,
                fraction: pairs.iter().filter(|(_, v)| *v > t).count() as f64 / pairs.len() as f64,
            })
            .collect()
    };
    ScoreIouStats {
        bins,
        exceedance,
        detection_count: pairs.len(),
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer
/// than two pairs or when either side is constant.
pub fn rank_correlation(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let n = pairs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation over detections whose best IoU is at least `min_iou`.
pub fn positive_score_iou_correlation(images: &[EvalImage], min_iou: f64) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = detection_ious(images)
        .into_iter()
        .filter(|(_, v)| *v >= min_iou)
        .collect();
    rank_correlation(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
            class_id: 0,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id: 0,
        }
    }

    /// A detection of width `w` in [0, 10] x [0, 1] against gt [0, 10] x [0, 1]
    /// has IoU w / 10.
    fn det_with_iou(v: f64, score: f64) -> Detection {
        det(0.0, 0.0, 10.0 * v, 1.0, score)
    }

    #[test]
    fn nms_examples() {
        let one = [det(0.0, 0.0, 1.0, 1.0, 0.5)];
        assert_eq!(nms(&one, 0.5), one.to_vec());

        // B2 covers 6/10 of B1
        let b1 = det(0.0, 0.0, 10.0, 1.0, 0.9);
        let b2 = det(0.0, 0.0, 6.0, 1.0, 0.8);
        let b3 = det(20.0, 20.0, 21.0, 21.0, 0.7);
        assert_abs_diff_eq!(iou(&b1.bbox, &b2.bbox), 0.6, epsilon = 1e-12);
        assert_eq!(nms(&[b3, b2, b1], 0.5), vec![b1, b3]);

        let disjoint = [
            det(0.0, 0.0, 1.0, 1.0, 0.2),
            det(5.0, 5.0, 6.0, 6.0, 0.9),
            det(9.0, 0.0, 10.0, 1.0, 0.5),
        ];
        let kept = nms(&disjoint, 0.5);
        assert_eq!(kept, vec![disjoint[1], disjoint[2], disjoint[0]]);
    }

    #[test]
    fn nms_is_class_aware() {
        let a = det(0.0, 0.0, 1.0, 1.0, 0.9);
        let b = Detection { class_id: 1, ..det(0.0, 0.0, 1.0, 1.0, 0.8) };
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det(0.0, 0.0, 1.0, 1.0, 0.5);
        let b = det(0.0, 0.0, 1.0, 1.0, 0.5);
        let b = Detection { bbox: BBox::new(0.0, 0.0, 1.0, 1.01), ..b };
        assert_eq!(nms(&[b, a], 0.5), vec![b]);
    }

    #[test]
    fn ap_examples() {
        let g = [gt(0.0, 0.0, 10.0, 1.0)];
        assert_eq!(ap_at_threshold(&[det_with_iou(0.6, 0.9)], &g, 0.5), 1.0);

        let dets = [det_with_iou(0.6, 0.9), det_with_iou(0.3, 0.8)];
        assert_eq!(ap_at_threshold(&dets, &g, 0.5), 1.0);
        assert_eq!(ap_at_threshold(&dets, &g, 0.7), 0.0);
    }

    #[test]
    fn ap_conventions() {
        assert_eq!(ap_at_threshold(&[], &[], 0.5), 1.0);
        assert!(ap_at_threshold_images(&[EvalImage::default()], 0.5).vacuous);
        assert_eq!(ap_at_threshold(&[det_with_iou(0.9, 0.9)], &[], 0.5), 0.0);
        assert_eq!(ap_at_threshold(&[], &[gt(0.0, 0.0, 1.0, 1.0)], 0.5), 0.0);
    }

    #[test]
    fn coco_table_examples() {
        let g = [gt(0.0, 0.0, 10.0, 1.0)];
        let perfect = coco_ap(&[det(0.0, 0.0, 10.0, 1.0, 0.9)], &g);
        assert!(perfect.ap.iter().all(|&v| v == 1.0));
        assert_eq!(perfect.mean, 1.0);

        let table = coco_ap(&[det_with_iou(0.72, 0.9)], &g);
        assert_eq!(table.ap70, 1.0);
        assert_eq!(table.ap75, 0.0);
        let mean = table.ap.iter().sum::<f64>() / 10.0;
        assert!((table.mean - mean).abs() <= 1e-12);
        assert_eq!(table.at(0.7), Some(1.0));
    }

    #[test]
    fn ap_pools_images() {
        // image 1 has its TP ranked after image 2's FP
        let images = [
            EvalImage {
                detections: vec![det(0.0, 0.0, 1.0, 1.0, 0.4)],
                ground_truth: vec![gt(0.0, 0.0, 1.0, 1.0)],
            },
            EvalImage {
                detections: vec![det(5.0, 5.0, 6.0, 6.0, 0.9)],
                ground_truth: vec![gt(0.0, 0.0, 1.0, 1.0)],
            },
        ];
        // ranks: FP, TP -> recall 0.5 reached with precision 0.5
        let ap = ap_at_threshold_images(&images, 0.5).ap;
        assert_abs_diff_eq!(ap, 51.0 * 0.5 / 101.0, epsilon = 1e-15);
    }

    #[test]
    fn stats_examples() {
        let g = [gt(0.0, 0.0, 10.0, 1.0)];
        let im = EvalImage {
            detections: vec![det_with_iou(1.0, 0.7), det_with_iou(1.0, 0.7)],
            ground_truth: g.to_vec(),
        };
        let s = score_iou_stats(&[im]);
        assert_eq!(s.bins.len(), 1);
        assert_eq!(s.bins[0].bin_lo, 0.95);
        assert_abs_diff_eq!(s.bins[0].mean_score, 0.7, epsilon = 1e-15);

        let im = EvalImage {
            detections: vec![det_with_iou(0.52, 0.3), det_with_iou(0.8, 0.9)],
            ground_truth: g.to_vec(),
        };
        let s = score_iou_stats(&[im]);
        assert_eq!(s.bin_mean(0.5), Some(0.3));
        assert_eq!(s.bin_mean(0.8), Some(0.9));
        assert_eq!(s.bin_mean(0.6), None);
        assert_eq!(s.exceedance_at(0.7), Some(0.5));
        assert_eq!(s.exceedance_at(0.5), Some(1.0));
    }

    #[test]
    fn stats_exclude_unmatched() {
        let im = EvalImage {
            detections: vec![det_with_iou(0.3, 0.9)],
            ground_truth: vec![gt(0.0, 0.0, 10.0, 1.0)],
        };
        let s = score_iou_stats(&[im]);
        assert!(s.bins.is_empty());
        assert_eq!(s.exceedance_at(0.5), Some(0.0));
        assert!(score_iou_stats(&[]).exceedance.is_empty());
    }

    #[test]
    fn spearman_examples() {
        let mono = [(1.0, 0.1), (2.0, 0.5), (3.0, 0.7), (4.0, 0.9)];
        assert_abs_diff_eq!(rank_correlation(&mono).unwrap(), 1.0, epsilon = 1e-12);
        let anti = [(1.0, 0.9), (2.0, 0.5), (3.0, 0.2)];
        assert_abs_diff_eq!(rank_correlation(&anti).unwrap(), -1.0, epsilon = 1e-12);
        let mixed = [(1.0, 3.0), (2.0, 1.0), (3.0, 2.0)];
        assert_abs_diff_eq!(rank_correlation(&mixed).unwrap(), -0.5, epsilon = 1e-12);
        assert_eq!(rank_correlation(&[(1.0, 2.0), (1.0, 3.0)]), None);
        assert_eq!(rank_correlation(&[(1.0, 2.0)]), None);
    }

    #[test]
    fn average_ranks_handle_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn csv_headers() {
        let table = coco_ap(&[], &[gt(0.0, 0.0, 1.0, 1.0)]);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,ap\n0.50,0\n"));
        assert!(text.trim_end().ends_with("mean,0"));
    }
}
