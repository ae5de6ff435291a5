//! Brute-force evaluation oracles shared by integration tests. They are
//! written from the metric definitions without reusing library code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tyrist_core::detect::{Detection, Target};
use tyrist_core::BBox;

/// Plain corner-based IoU.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Score order with the documented tie-breaks: class, then x, then y, then
/// image id.
fn order_key(d: &Detection) -> (i64, usize, i64, i64, usize) {
    let q = |v: f64| (v * 1e9).round() as i64;
    (-q(d.score), d.class_id, q(d.bbox.cx), q(d.bbox.cy), d.image_id)
}

/// Greedy matching over an explicit IoU table. Returns, for each detection
/// in evaluation order, whether it is a true positive.
pub fn oracle_match(dets: &[Detection], gts: &[Vec<Target>], thr: f64) -> Vec<(Detection, bool)> {
    let mut sorted = dets.to_vec();
    sorted.sort_by_key(order_key);
    let flat: Vec<(usize, Target)> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |t| (i, *t)))
        .collect();
    let table: Vec<Vec<f64>> = sorted
        .iter()
        .map(|d| flat.iter().map(|(_, t)| oracle_iou(&d.bbox, &t.bbox)).collect())
        .collect();
    let mut used = vec![false; flat.len()];
    let mut out = Vec::new();
    for (k, d) in sorted.iter().enumerate() {
        let mut pick: Option<usize> = None;
        for j in 0..flat.len() {
            let (img, t) = flat[j];
            let eligible = !used[j] && img == d.image_id && t.class_id == d.class_id && table[k][j] >= thr;
            if eligible && pick.is_none_or(|p| table[k][j] > table[k][p]) {
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        out.push((*d, pick.is_some()));
    }
    out
}

/// `(precision, recall, f1)` for detections at or above `conf`.
pub fn oracle_prf(dets: &[Detection], gts: &[Vec<Target>], conf: f64, thr: f64) -> (f64, f64, f64) {
    let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= conf).copied().collect();
    let m = oracle_match(&kept, gts, thr);
    let tp = m.iter().filter(|x| x.1).count() as f64;
    let n_det = kept.len() as f64;
    let n_gt = gts.iter().map(Vec::len).sum::<usize>() as f64;
    let p = if n_det > 0.0 { tp / n_det } else { 0.0 };
    let r = if n_gt > 0.0 { tp / n_gt } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Single-class AP by enumerating every score threshold, re-matching from
/// scratch at each, and integrating the step curve of the best precision
/// achievable at or beyond each recall level.
fn oracle_ap_one_class(dets: &[Detection], gts: &[Vec<Target>], thr: f64) -> f64 {
    let n_gt = gts.iter().map(Vec::len).sum::<usize>() as f64;
    if n_gt == 0.0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (p, r, _) = oracle_prf(dets, gts, t, thr);
            (r, p)
        })
        .collect();
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).filter(|r| *r > 0.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let best = curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    ap
}

/// Mean of per-class AP over the classes present in the ground truth.
pub fn oracle_ap(dets: &[Detection], gts: &[Vec<Target>], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().flatten().map(|t| t.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let d: Vec<Detection> = dets.iter().filter(|x| x.class_id == c).copied().collect();
            let g: Vec<Vec<Target>> = gts
                .iter()
                .map(|v| v.iter().filter(|t| t.class_id == c).copied().collect())
                .collect();
            oracle_ap_one_class(&d, &g, thr)
        })
        .sum();
    total / classes.len() as f64
}

/// A random evaluation case with at most five ground-truth boxes and five
/// detections on a coarse lattice, so overlaps and score ties are common.
pub fn random_case(seed: u64) -> (Vec<Detection>, Vec<Vec<Target>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = rng.random_range(1..=2usize);
    let classes = rng.random_range(1..=2usize);
    let mut gts = vec![Vec::new(); images];
    for _ in 0..rng.random_range(0..=5) {
        let img = rng.random_range(0..images);
        let s = rng.random_range(3..=6) as f64;
        gts[img].push(Target {
            bbox: BBox::new(
                rng.random_range(0..8) as f64 * 1.5,
                rng.random_range(0..8) as f64 * 1.5,
                s,
                s,
            ),
            class_id: rng.random_range(0..classes),
        });
    }
    let dets = (0..rng.random_range(0..=5))
        .map(|_| {
            let s = rng.random_range(3..=6) as f64;
            Detection {
                image_id: rng.random_range(0..images),
                bbox: BBox::new(
                    rng.random_range(0..8) as f64 * 1.5,
                    rng.random_range(0..8) as f64 * 1.5,
                    s,
                    s,
                ),
                class_id: rng.random_range(0..classes),
                score: rng.random_range(1..=5) as f64 / 5.0 - 0.1,
            }
        })
        .collect();
    (dets, gts)
}
