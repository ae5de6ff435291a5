//! Detection evaluation: greedy IoU matching, precision/recall/F1 at an
//! operating point, and all-point AP with a monotone precision envelope.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detect::{self, Detection, Target};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::model::ModelGraph;
use crate::synth::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
/// Detections below this score are not kept for AP computation.
pub const AP_SCORE_FLOOR: f64 = 1e-3;

/// Outcome of matching one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    pub det: Detection,
    /// Index of the matched ground truth within its image, if any.
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Detections in evaluation order with their match, plus the number of
/// ground-truth boxes considered.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub ranked: Vec<MatchedDetection>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        self.counts_above(f64::NEG_INFINITY)
    }

    /// Counts using only detections scoring at least `thresh`. Greedy
    /// matching walks in score order, so the matches of those detections do
    /// not depend on lower-scoring ones.
    pub fn counts_above(&self, thresh: f64) -> Counts {
        let kept = self.ranked.iter().filter(|m| m.det.score >= thresh);
        let (tp, fp) = kept.fold((0, 0), |(tp, fp), m| match m.gt_index {
            Some(_) => (tp + 1, fp),
            None => (tp, fp + 1),
        });
        Counts {
            tp,
            fp,
            fn_: self.num_gt - tp,
        }
    }
}

/// Evaluation order: rank order within an image, images in id order for
/// exact ties.
fn eval_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    detect::rank_order(a, b).then(a.image_id.cmp(&b.image_id))
}

/// Greedy matching. `gts[i]` holds the ground truth of image `i`. Each
/// detection, in descending score order, takes the unmatched ground truth of
/// its class and image with the highest IoU, provided that IoU is at least
/// `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[Vec<Target>], iou_thresh: f64) -> Result<MatchResult> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::invalid(format!(
            "match IoU threshold must be in (0,1], got {iou_thresh}"
        )));
    }
    if let Some(d) = dets.iter().find(|d| d.image_id >= gts.len()) {
        return Err(Error::invalid(format!(
            "detection refers to image {} but ground truth covers {} images",
            d.image_id,
            gts.len()
        )));
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(eval_order);
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let ranked = sorted
        .into_iter()
        .map(|det| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts[det.image_id].iter().enumerate() {
                if taken[det.image_id][j] || gt.class_id != det.class_id {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[det.image_id][j] = true;
            }
            MatchedDetection {
                det,
                gt_index: best.map(|(j, _)| j),
            }
        })
        .collect();
    Ok(MatchResult {
        ranked,
        num_gt: gts.iter().map(Vec::len).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and their harmonic mean. Precision is 0 without
/// detections and recall is 0 without ground truth.
pub fn pr_f1(c: &Counts) -> PrF1 {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    PrF1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `(recall, precision)` after each group of equally scored detections.
pub fn pr_points(result: &MatchResult) -> Vec<(f64, f64)> {
    let mut points = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    for (i, m) in result.ranked.iter().enumerate() {
        n += 1;
        tp += m.gt_index.is_some() as usize;
        let group_ends = result
            .ranked
            .get(i + 1)
            .is_none_or(|next| next.det.score != m.det.score);
        if group_ends {
            let recall = if result.num_gt == 0 {
                0.0
            } else {
                tp as f64 / result.num_gt as f64
            };
            points.push((recall, tp as f64 / n as f64));
        }
    }
    points
}

/// Area under the step curve of the monotone precision envelope.
pub fn ap_from_points(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(r, _), p) in points.iter().zip(envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// AP over one class, or mean AP over the classes present in the ground
/// truth. Zero when there is no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[Vec<Target>], iou_thresh: f64) -> Result<f64> {
    let classes: BTreeSet<usize> = gts.iter().flatten().map(|t| t.class_id).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &class in &classes {
        let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class_id == class).copied().collect();
        let class_gts: Vec<Vec<Target>> = gts
            .iter()
            .map(|g| g.iter().filter(|t| t.class_id == class).copied().collect())
            .collect();
        let m = match_detections(&class_dets, &class_gts, iou_thresh)?;
        total += ap_from_points(&pr_points(&m));
    }
    Ok(total / classes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    #[serde(flatten)]
    pub counts: Counts,
    pub num_gt: usize,
    pub num_images: usize,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    /// `(recall, precision)` samples over all detections.
    pub pr_curve: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_pr_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "recall,precision")?;
        for (r, p) in &self.pr_curve {
            writeln!(out, "{r:.6},{p:.6}")?;
        }
        Ok(())
    }
}

/// Full report: P/R/F1 at `conf_thresh`, AP and the PR curve over every
/// detection given.
pub fn evaluate(dets: &[Detection], gts: &[Vec<Target>], conf_thresh: f64, iou_thresh: f64) -> Result<EvalReport> {
    let m = match_detections(dets, gts, iou_thresh)?;
    let counts = m.counts_above(conf_thresh);
    let prf = pr_f1(&counts);
    Ok(EvalReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        ap50: average_precision(dets, gts, iou_thresh)?,
        counts,
        num_gt: m.num_gt,
        num_images: gts.len(),
        conf_thresh,
        iou_thresh,
        pr_curve: pr_points(&m),
    })
}

/// Stacks same-sized grayscale samples into a `[N,1,H,W]` batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) || s.image.shape()[0] != 1 {
            return Err(Error::invalid(format!(
                "batch mixes image shapes {:?} and [1, {h}, {w}]",
                s.image.shape()
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&[samples.len(), 1, h, w], data)
}

/// Runs the model in eval mode and returns post-NMS detections scoring at
/// least `score_floor`, with image ids indexing `samples`.
pub fn predict(
    model: &ModelGraph,
    samples: &[Sample],
    batch_size: usize,
    score_floor: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let strides = model.head_strides().into_iter().collect();
    let mut all = Vec::new();
    let refs: Vec<&Sample> = samples.iter().collect();
    for (b, chunk) in refs.chunks(batch_size.max(1)).enumerate() {
        let images = stack_images(chunk)?;
        let outputs = model.forward(&images)?;
        for per_image in detect::decode(&outputs, &strides, score_floor, b * batch_size.max(1))? {
            all.extend(detect::nms(&per_image, nms_iou)?);
        }
    }
    Ok(all)
}

/// Predicts on `samples` and evaluates against their targets with the
/// pipeline defaults.
pub fn evaluate_model(model: &ModelGraph, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    let dets = predict(model, samples, batch_size, AP_SCORE_FLOOR, detect::DEFAULT_NMS_IOU)?;
    let gts: Vec<Vec<Target>> = samples.iter().map(|s| s.targets.clone()).collect();
    evaluate(&dets, &gts, detect::DEFAULT_CONF_THRESH, DEFAULT_MATCH_IOU)
}
