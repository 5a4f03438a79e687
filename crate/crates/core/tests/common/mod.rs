//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use iou_balanced::evaluation::{Detection, GroundTruth};
use iou_balanced::geometry::{iou, BBox};
use rand::Rng;

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let cx = rng.gen_range(0.0..extent);
    let cy = rng.gen_range(0.0..extent);
    let w = rng.gen_range(1.0..extent / 2.0);
    let h = rng.gen_range(1.0..extent / 2.0);
    BBox::from_center(cx, cy, w, h)
}

/// A small single-image instance. Detections are jittered copies of ground
/// truth or random boxes, with distinct scores.
pub fn random_instance<R: Rng>(rng: &mut R, num_classes: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_gt = rng.gen_range(0..=3);
    let n_det = rng.gen_range(0..=5);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| GroundTruth {
            bbox: random_box(rng, 20.0),
            class_id: rng.gen_range(0..num_classes),
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            let bbox = if !gts.is_empty() && rng.gen_bool(0.7) {
                let g = gts[rng.gen_range(0..gts.len())].bbox;
                let j = |r: &mut R| r.gen_range(-1.5..1.5);
                BBox::from_center(g.cx() + j(rng), g.cy() + j(rng), g.w() * rng.gen_range(0.8..1.25), g.h() * rng.gen_range(0.8..1.25))
            } else {
                random_box(rng, 20.0)
            };
            Detection {
                bbox,
                score: rng.gen_range(0.0..1.0),
                class_id: rng.gen_range(0..num_classes),
            }
        })
        .collect();
    (dets, gts)
}

/// Every injective partial assignment of detections (in rank order) to
/// ground truths with IoU >= thr, each encoded as the sequence of matched
/// IoUs (0 for unmatched).
fn assignments(dets: &[BBox], gts: &[BBox], thr: f64, used: &mut Vec<bool>, prefix: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
    let k = prefix.len();
    if k == dets.len() {
        out.push(prefix.clone());
        return;
    }
    prefix.push(0.0);
    assignments(dets, gts, thr, used, prefix, out);
    prefix.pop();
    for g in 0..gts.len() {
        let v = iou(&dets[k], &gts[g]);
        if !used[g] && v >= thr {
            used[g] = true;
            prefix.push(v);
            assignments(dets, gts, thr, used, prefix, out);
            prefix.pop();
            used[g] = false;
        }
    }
}

fn lex_max(candidates: Vec<Vec<f64>>) -> Vec<f64> {
    candidates
        .into_iter()
        .max_by(|a, b| a.partial_cmp(b).expect("finite IoUs"))
        .unwrap_or_default()
}

/// AP of one class: the matching is the lexicographically largest IoU
/// sequence over all valid assignments, and the precision at each of the
/// 101 recall levels is the best precision at any rank reaching that recall.
fn brute_class_ap(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> f64 {
    let mut ranked: Vec<&Detection> = dets.to_vec();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let boxes: Vec<BBox> = ranked.iter().map(|d| d.bbox).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let mut all = Vec::new();
    assignments(&boxes, &gt_boxes, thr, &mut vec![false; gts.len()], &mut Vec::new(), &mut all);
    let best = lex_max(all);
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, v) in best.iter().enumerate() {
        if *v > 0.0 {
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Single-image AP averaged over the classes present in the ground truth.
pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut total = 0.0;
    for &c in &classes {
        let d: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        total += brute_class_ap(&d, &g, thr);
    }
    total / classes.len() as f64
}

/// Moves one parameterized coordinate of the center-form box
/// `(cx, cy, w, h)` by `d` (`w_s` is the reference width for center
/// offsets). Returns the geometric IoU against the unmoved box, the
/// Bounded-IoU axis, and the target extent along the moved coordinate.
pub fn single_coordinate_iou(c: [f64; 4], coord: usize, d: f64, w_s: f64) -> (f64, iou_balanced::BoundAxis, f64) {
    use iou_balanced::BoundAxis;
    let [cx, cy, w, h] = c;
    let target = BBox::from_center(cx, cy, w, h);
    let (moved, axis, extent) = match coord {
        0 => (BBox::from_center(cx + d * w_s, cy, w, h), BoundAxis::Center, w),
        1 => (BBox::from_center(cx, cy + d * w_s, w, h), BoundAxis::Center, h),
        2 => (BBox::from_center(cx, cy, w * d.exp(), h), BoundAxis::Size, w),
        _ => (BBox::from_center(cx, cy, w, h * d.exp()), BoundAxis::Size, h),
    };
    (iou(&moved, &target), axis, extent)
}
