//! Target assignment, the composite detection loss, decoding and NMS.
//!
//! Each head cell predicts `[tx, ty, tw, th, obj, cls_0, …]`. A cell at
//! column `gx` of a stride-`s` head decodes to
//! `cx = (gx + σ(tx))·s`, `w = s·exp(min(tw, 8))` (and likewise for `y`, `h`),
//! with score `σ(obj)·max_k σ(cls_k)`.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_loss_grad, iou, BBox, LossKind};
use crate::model::Head;
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{Backward, Float, Tensor};

/// Upper clamp on the size logits before exponentiation.
pub const MAX_SIZE_LOGIT: f64 = 8.0;
pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Geometry of one head's output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadGrid {
    pub head: Head,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl HeadGrid {
    /// Grids of every head for an `h×w` image.
    pub fn for_image(heads: &[(Head, usize)], h: usize, w: usize) -> Vec<HeadGrid> {
        heads
            .iter()
            .map(|&(head, stride)| HeadGrid {
                head,
                stride,
                h: h / stride,
                w: w / stride,
            })
            .collect()
    }
}

/// A ground-truth box with its class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignedCell {
    pub batch: usize,
    pub head: Head,
    pub gy: usize,
    pub gx: usize,
    pub target: Target,
}

/// Cells responsible for each ground truth, plus the ground truths that lost
/// a cell collision, as `(batch, index into that image's targets)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub cells: Vec<AssignedCell>,
    pub unassigned: Vec<(usize, usize)>,
}

/// Head chosen for a box: the largest stride `s` with `max(w,h)/s ≥ 2`,
/// otherwise the finest head.
pub fn choose_head(bbox: &BBox, grids: &[HeadGrid]) -> Result<HeadGrid> {
    let mut sorted = grids.to_vec();
    sorted.sort_by_key(|g| g.stride);
    let finest = *sorted
        .first()
        .ok_or_else(|| Error::config("target assignment needs at least one active head"))?;
    let size = bbox.w.max(bbox.h);
    Ok(sorted
        .iter()
        .rev()
        .find(|g| size / g.stride as f64 >= 2.0)
        .copied()
        .unwrap_or(finest))
}

/// Assigns each box of each image to the cell containing its center on its
/// chosen head. When two boxes land in one cell the larger-area box keeps it
/// (the earlier box on ties).
pub fn assign_targets(targets: &[Vec<Target>], grids: &[HeadGrid]) -> Result<Assignment> {
    if grids.is_empty() {
        return Err(Error::config("target assignment needs at least one active head"));
    }
    let mut out = Assignment::default();
    for (batch, image_targets) in targets.iter().enumerate() {
        let mut taken: BTreeMap<(Head, usize, usize), usize> = BTreeMap::new();
        for (i, t) in image_targets.iter().enumerate() {
            t.bbox.validate()?;
            let g = choose_head(&t.bbox, grids)?;
            let s = g.stride as f64;
            let gx = ((t.bbox.cx / s).floor().max(0.0) as usize).min(g.w - 1);
            let gy = ((t.bbox.cy / s).floor().max(0.0) as usize).min(g.h - 1);
            let key = (g.head, gy, gx);
            match taken.get(&key) {
                Some(&j) if image_targets[j].bbox.area() >= t.bbox.area() => out.unassigned.push((batch, i)),
                Some(&j) => {
                    out.unassigned.push((batch, j));
                    taken.insert(key, i);
                }
                None => {
                    taken.insert(key, i);
                }
            }
        }
        for ((head, gy, gx), i) in taken {
            out.cells.push(AssignedCell {
                batch,
                head,
                gy,
                gx,
                target: image_targets[i],
            });
        }
    }
    out.unassigned.sort_unstable();
    Ok(out)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Box regression targets `[tx, ty, tw, th]` that decode to `bbox` at the
/// given cell. The in-cell offset is kept a hair inside `(0, 1)`.
pub fn encode_box(bbox: &BBox, gx: usize, gy: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let off = |c: f64, g: usize| (c / s - g as f64).clamp(1e-7, 1.0 - 1e-7);
    [
        logit(off(bbox.cx, gx)),
        logit(off(bbox.cy, gy)),
        (bbox.w / s).ln(),
        (bbox.h / s).ln(),
    ]
}

/// Decoded box and the derivative of `(cx, cy, w, h)` with respect to
/// `(tx, ty, tw, th)` (the Jacobian is diagonal).
pub fn decode_box(t: [f64; 4], gx: usize, gy: usize, stride: usize) -> (BBox, [f64; 4]) {
    let s = stride as f64;
    let (sx, sy) = (sigmoid_scalar(t[0]), sigmoid_scalar(t[1]));
    let (ew, eh) = (t[2].min(MAX_SIZE_LOGIT).exp(), t[3].min(MAX_SIZE_LOGIT).exp());
    let bbox = BBox::new((gx as f64 + sx) * s, (gy as f64 + sy) * s, s * ew, s * eh);
    let jac = [
        s * sx * (1.0 - sx),
        s * sy * (1.0 - sy),
        if t[2] < MAX_SIZE_LOGIT { s * ew } else { 0.0 },
        if t[3] < MAX_SIZE_LOGIT { s * eh } else { 0.0 },
    ];
    (bbox, jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub box_kind: LossKind,
    pub lambda_box: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            box_kind: LossKind::Nwd {
                c: crate::geometry::DEFAULT_NWD_C,
            },
            lambda_box: 5.0,
            lambda_obj: 1.0,
            lambda_cls: 0.5,
        }
    }
}

impl LossConfig {
    pub fn with_kind(box_kind: LossKind) -> Self {
        Self {
            box_kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_box, self.lambda_obj, self.lambda_cls];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative, got {l:?}"
            )));
        }
        if l.iter().all(|v| *v == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if let LossKind::Nwd { c } = self.box_kind {
            LossKind::nwd(c)?;
        }
        Ok(())
    }
}

/// Weighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
}

/// Numerically stable BCE with logits and its derivative.
fn bce_with_logits(x: f64, target: f64) -> (f64, f64) {
    let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
    (loss, sigmoid_scalar(x) - target)
}

struct TotalLossBackward<T> {
    /// d(total)/d(head output), per parent.
    grads: Vec<Vec<T>>,
}

impl<T: Float> Backward<T> for TotalLossBackward<T> {
    fn name(&self) -> &'static str {
        "total_loss"
    }

    fn backward(&self, _parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = grad_out[0];
        Ok(self
            .grads
            .iter()
            .map(|d| Some(d.iter().map(|&v| v * g).collect()))
            .collect())
    }
}

/// Composite detection loss over raw head outputs:
/// `λ_box·mean_assigned(box_loss) + λ_obj·mean_all(BCE(obj)) +
/// λ_cls·mean_assigned(BCE(cls))`. Returns a differentiable scalar and the
/// weighted components.
pub fn total_loss<T: Float>(
    outputs: &BTreeMap<Head, Tensor<T>>,
    strides: &BTreeMap<Head, usize>,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossBreakdown)> {
    cfg.validate()?;
    let heads: Vec<Head> = outputs.keys().copied().collect();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(heads.len());
    let mut dims = Vec::with_capacity(heads.len());
    let mut total_cells = 0usize;
    for h in &heads {
        let (n, c, gh, gw) = outputs[h].dims4()?;
        if !strides.contains_key(h) {
            return Err(Error::invalid(format!("no stride given for head {h}")));
        }
        if c < 6 {
            return Err(Error::invalid(format!("head {h} has {c} channels; need 5 + classes")));
        }
        total_cells += n * gh * gw;
        dims.push((n, c, gh, gw));
        grads.push(vec![0.0; n * c * gh * gw]);
    }
    let idx = |(_, c, gh, gw): (usize, usize, usize, usize), b: usize, ch: usize, y: usize, x: usize| {
        ((b * c + ch) * gh + y) * gw + x
    };

    // objectness over every cell; assigned cells get target 1
    let mut positive: Vec<Vec<bool>> = dims.iter().map(|&(n, _, gh, gw)| vec![false; n * gh * gw]).collect();
    for cell in &assignment.cells {
        let hi = heads
            .iter()
            .position(|h| *h == cell.head)
            .ok_or_else(|| Error::invalid(format!("assignment refers to missing head {}", cell.head)))?;
        let (n, _, gh, gw) = dims[hi];
        if cell.batch >= n || cell.gy >= gh || cell.gx >= gw {
            return Err(Error::invalid(format!(
                "assigned cell {cell:?} lies outside head {} output",
                cell.head
            )));
        }
        positive[hi][(cell.batch * gh + cell.gy) * gw + cell.gx] = true;
    }
    let mut obj_sum = 0.0;
    for (hi, h) in heads.iter().enumerate() {
        let d = dims[hi];
        let data = outputs[h].data();
        let (n, _, gh, gw) = d;
        for b in 0..n {
            for y in 0..gh {
                for x in 0..gw {
                    let i = idx(d, b, 4, y, x);
                    let t = if positive[hi][(b * gh + y) * gw + x] { 1.0 } else { 0.0 };
                    let (l, g) = bce_with_logits(data[i].to_f64c(), t);
                    obj_sum += l;
                    grads[hi][i] += cfg.lambda_obj * g / total_cells as f64;
                }
            }
        }
    }
    let obj = cfg.lambda_obj * obj_sum / total_cells as f64;

    let n_pos = assignment.cells.len();
    let (mut box_sum, mut cls_sum) = (0.0, 0.0);
    for cell in &assignment.cells {
        let hi = heads.iter().position(|h| *h == cell.head).expect("checked above");
        let d = dims[hi];
        let data = outputs[&cell.head].data();
        let stride = strides[&cell.head];
        let at = |ch| idx(d, cell.batch, ch, cell.gy, cell.gx);
        let t = [0, 1, 2, 3].map(|ch| data[at(ch)].to_f64c());
        let (pred, jac) = decode_box(t, cell.gx, cell.gy, stride);
        let (l, dl) = box_loss_grad(&pred, &cell.target.bbox, cfg.box_kind)?;
        box_sum += l;
        for k in 0..4 {
            grads[hi][at(k)] += cfg.lambda_box * dl[k] * jac[k] / n_pos as f64;
        }
        let classes = d.1 - 5;
        if cell.target.class_id >= classes {
            return Err(Error::invalid(format!(
                "target class {} but the model predicts {classes} classes",
                cell.target.class_id
            )));
        }
        for k in 0..classes {
            let target = if k == cell.target.class_id { 1.0 } else { 0.0 };
            let (l, g) = bce_with_logits(data[at(5 + k)].to_f64c(), target);
            cls_sum += l;
            grads[hi][at(5 + k)] += cfg.lambda_cls * g / (n_pos * classes) as f64;
        }
    }
    let (box_loss, cls) = if n_pos == 0 {
        (0.0, 0.0)
    } else {
        let classes = dims[0].1 - 5;
        (
            cfg.lambda_box * box_sum / n_pos as f64,
            cfg.lambda_cls * cls_sum / (n_pos * classes) as f64,
        )
    };
    let total = box_loss + obj + cls;
    let parents: Vec<Tensor<T>> = heads.iter().map(|h| outputs[h].clone()).collect();
    let op = TotalLossBackward {
        grads: grads.into_iter().map(|g| g.into_iter().map(T::of).collect()).collect(),
    };
    let loss = Tensor::from_op(vec![1], vec![T::of(total)], parents, Box::new(op));
    Ok((
        loss,
        LossBreakdown {
            total,
            box_loss,
            obj,
            cls,
        },
    ))
}

/// A decoded prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Decodes every cell scoring at least `conf_thresh`. Batch item `b` gets
/// image id `first_image_id + b`. Returns one list per batch item.
pub fn decode<T: Float>(
    outputs: &BTreeMap<Head, Tensor<T>>,
    strides: &BTreeMap<Head, usize>,
    conf_thresh: f64,
    first_image_id: usize,
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..1.0).contains(&conf_thresh) {
        return Err(Error::invalid(format!(
            "conf_thresh must be in [0,1), got {conf_thresh}"
        )));
    }
    let mut batch_size = None;
    let mut out: Vec<Vec<Detection>> = Vec::new();
    for (h, t) in outputs {
        let (n, c, gh, gw) = t.dims4()?;
        if *batch_size.get_or_insert(n) != n {
            return Err(Error::invalid("head outputs disagree on batch size"));
        }
        out.resize(n, Vec::new());
        let stride = *strides
            .get(h)
            .ok_or_else(|| Error::invalid(format!("no stride given for head {h}")))?;
        let data = t.data();
        let at = |b: usize, ch: usize, y: usize, x: usize| data[((b * c + ch) * gh + y) * gw + x].to_f64c();
        for (b, dets) in out.iter_mut().enumerate() {
            for y in 0..gh {
                for x in 0..gw {
                    let obj = sigmoid_scalar(at(b, 4, y, x));
                    let (class_id, cls) = (0..c - 5)
                        .map(|k| (k, sigmoid_scalar(at(b, 5 + k, y, x))))
                        .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
                    let score = obj * cls;
                    if score < conf_thresh {
                        continue;
                    }
                    let t = [0, 1, 2, 3].map(|ch| at(b, ch, y, x));
                    let (bbox, _) = decode_box(t, x, y, stride);
                    dets.push(Detection {
                        image_id: first_image_id + b,
                        bbox,
                        class_id,
                        score,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic ranking: score descending, then lower class id, then
/// left-most center, then top-most center.
pub fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
}

/// Greedy per-class suppression: walking detections in rank order, a box is
/// dropped when it overlaps an already kept box of its class with IoU above
/// `iou_thresh`. Survivors are returned in rank order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::invalid(format!(
            "NMS IoU threshold must be in (0,1), got {iou_thresh}"
        )));
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Writes `image_id,class_id,score,cx,cy,w,h` rows.
pub fn write_detections_csv<W: Write>(mut out: W, dets: &[Detection]) -> std::io::Result<()> {
    writeln!(out, "image_id,class_id,score,cx,cy,w,h")?;
    for d in dets {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.image_id, d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_NWD_C;
    use crate::model::{ModelConfig, ModelGraph};
    use crate::nn::Ctx;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(head: Head, stride: usize, size: usize) -> HeadGrid {
        HeadGrid {
            head,
            stride,
            h: size / stride,
            w: size / stride,
        }
    }

    fn target(cx: f64, cy: f64, w: f64, h: f64) -> Target {
        Target {
            bbox: BBox::new(cx, cy, w, h),
            class_id: 0,
        }
    }

    #[test]
    fn assignment_examples() {
        let p2 = [grid(Head::P2, 2, 256)];
        let a = assign_targets(&[vec![target(100.0, 100.0, 4.0, 4.0)]], &p2).unwrap();
        assert_eq!((a.cells[0].gy, a.cells[0].gx), (50, 50));

        let collide = vec![target(100.2, 100.2, 3.0, 3.0), target(100.7, 100.9, 5.0, 5.0)];
        let a = assign_targets(&[collide], &p2).unwrap();
        assert_eq!(a.cells.len(), 1);
        assert_eq!(a.cells[0].target.bbox.w, 5.0);
        assert_eq!(a.unassigned, vec![(0, 0)]);

        let two = [grid(Head::P2, 2, 256), grid(Head::P3, 4, 256)];
        assert_eq!(
            choose_head(&BBox::new(50.0, 50.0, 6.0, 6.0), &two).unwrap().head,
            Head::P2
        );
        assert_eq!(
            choose_head(&BBox::new(50.0, 50.0, 8.0, 3.0), &two).unwrap().head,
            Head::P3
        );
        assert_eq!(
            choose_head(&BBox::new(50.0, 50.0, 1.0, 1.0), &two).unwrap().head,
            Head::P2
        );
        assert!(matches!(assign_targets(&[vec![]], &[]), Err(Error::Config(_))));
    }

    /// Rule oracle: evaluate the stated formula directly over every head.
    #[test]
    fn head_choice_matches_rule_oracle() {
        let grids = [
            grid(Head::P2, 2, 512),
            grid(Head::P3, 4, 512),
            grid(Head::P4, 8, 512),
            grid(Head::P5, 16, 512),
        ];
        for size in 1..80 {
            let b = BBox::new(100.0, 100.0, size as f64, (size / 2).max(1) as f64);
            let mut want = 2;
            for s in [2usize, 4, 8, 16] {
                if size as f64 / s as f64 >= 2.0 {
                    want = s;
                }
            }
            assert_eq!(choose_head(&b, &grids).unwrap().stride, want, "size {size}");
        }
    }

    #[test]
    fn decode_examples() {
        let (b, _) = decode_box([0.0, 0.0, 0.0, 0.0], 3, 5, 4);
        assert_eq!((b.cx, b.cy, b.w, b.h), (14.0, 22.0, 4.0, 4.0));
        let (b, jac) = decode_box([0.0, 0.0, 20.0, 0.0], 0, 0, 2);
        assert_eq!(b.w, 2.0 * 8f64.exp());
        assert_eq!(jac[2], 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [2, 4, 8, 16, 32] {
            for _ in 0..500 {
                let b = BBox::new(
                    rng.random_range(0.0..512.0),
                    rng.random_range(0.0..512.0),
                    rng.random_range(1.0..64.0),
                    rng.random_range(1.0..64.0),
                );
                let (gx, gy) = ((b.cx / stride as f64) as usize, (b.cy / stride as f64) as usize);
                let (d, _) = decode_box(encode_box(&b, gx, gy, stride), gx, gy, stride);
                for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.h, b.h)] {
                    assert!((x - y).abs() < 1e-4, "stride {stride}: {d:?} vs {b:?}");
                }
            }
        }
    }

    fn outputs_for(n: usize, size: usize, classes: usize, fill: f64) -> BTreeMap<Head, Tensor<f64>> {
        BTreeMap::from([(Head::P2, Tensor::full(&[n, 5 + classes, size / 2, size / 2], fill))])
    }

    fn set(t: &mut Vec<f64>, shape: (usize, usize, usize, usize), b: usize, ch: usize, y: usize, x: usize, v: f64) {
        let (_, c, h, w) = shape;
        t[((b * c + ch) * h + y) * w + x] = v;
    }

    /// Builds raw outputs that decode exactly to the targets with logits `±m`.
    fn perfect_outputs(targets: &[Target], size: usize, m: f64) -> (BTreeMap<Head, Tensor<f64>>, Assignment) {
        let grids = [grid(Head::P2, 2, size)];
        let a = assign_targets(&[targets.to_vec()], &grids).unwrap();
        let shape = (1, 6, size / 2, size / 2);
        let mut data = vec![0.0; 6 * (size / 2) * (size / 2)];
        for y in 0..size / 2 {
            for x in 0..size / 2 {
                set(&mut data, shape, 0, 4, y, x, -m);
            }
        }
        for c in &a.cells {
            let t = encode_box(&c.target.bbox, c.gx, c.gy, 2);
            for k in 0..4 {
                set(&mut data, shape, 0, k, c.gy, c.gx, t[k]);
            }
            set(&mut data, shape, 0, 4, c.gy, c.gx, m);
            set(&mut data, shape, 0, 5, c.gy, c.gx, m);
        }
        let out = BTreeMap::from([(Head::P2, Tensor::new(&[1, 6, size / 2, size / 2], data).unwrap())]);
        (out, a)
    }

    #[test]
    fn perfect_predictions_approach_zero_loss() {
        let targets = [target(10.3, 12.6, 4.0, 5.0), target(20.5, 6.2, 3.0, 3.0)];
        let strides = BTreeMap::from([(Head::P2, 2)]);
        let mut last = f64::INFINITY;
        for m in [5.0, 10.0, 20.0, 30.0] {
            let (out, a) = perfect_outputs(&targets, 32, m);
            for kind in [LossKind::Ciou, LossKind::Nwd { c: DEFAULT_NWD_C }] {
                let (loss, parts) = total_loss(&out, &strides, &a, &LossConfig::with_kind(kind)).unwrap();
                assert!(parts.box_loss < 1e-9, "{parts:?}");
                assert!(loss.item() > 0.0 && loss.item() < last + 1e-12);
            }
            let (loss, _) = total_loss(&out, &strides, &a, &LossConfig::default()).unwrap();
            last = loss.item();
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn box_kind_does_not_change_obj_and_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [2, 7, 16, 16];
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let out = BTreeMap::from([(Head::P2, Tensor::new(&shape, data).unwrap())]);
        let targets = vec![vec![target(5.0, 7.0, 3.0, 4.0)], vec![target(20.0, 20.0, 6.0, 6.0)]];
        let a = assign_targets(&targets, &[grid(Head::P2, 2, 32)]).unwrap();
        let strides = BTreeMap::from([(Head::P2, 2)]);
        let (_, c) = total_loss(&out, &strides, &a, &LossConfig::with_kind(LossKind::Ciou)).unwrap();
        let (_, n) = total_loss(&out, &strides, &a, &LossConfig::with_kind(LossKind::Nwd { c: 17.0 })).unwrap();
        assert_eq!(c.obj.to_bits(), n.obj.to_bits());
        assert_eq!(c.cls.to_bits(), n.cls.to_bits());
        assert_ne!(c.box_loss, n.box_loss);
    }

    #[test]
    fn no_assigned_cells_leaves_only_objectness() {
        let out = outputs_for(1, 16, 1, 0.3);
        let strides = BTreeMap::from([(Head::P2, 2)]);
        let (loss, parts) = total_loss(&out, &strides, &Assignment::default(), &LossConfig::default()).unwrap();
        assert_eq!(parts.box_loss, 0.0);
        assert_eq!(parts.cls, 0.0);
        let want = 0.3f64.max(0.0) + (-0.3f64).exp().ln_1p();
        assert!((parts.obj - want).abs() < 1e-12);
        assert_eq!(loss.item(), parts.total);
    }

    #[test]
    fn loss_config_validation() {
        let zero = LossConfig {
            lambda_box: 0.0,
            lambda_obj: 0.0,
            lambda_cls: 0.0,
            ..LossConfig::default()
        };
        assert!(zero.validate().is_err());
        let neg = LossConfig {
            lambda_box: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences_on_raw_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [1, 6, 8, 8];
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(&shape, data).unwrap();
        let targets = vec![vec![target(5.3, 7.1, 3.0, 4.0), target(11.0, 3.3, 2.0, 2.5)]];
        let a = assign_targets(&targets, &[grid(Head::P2, 2, 16)]).unwrap();
        let strides = BTreeMap::from([(Head::P2, 2)]);
        for kind in [LossKind::Ciou, LossKind::Nwd { c: 17.0 }, LossKind::Iou] {
            let f = |x: &Tensor<f64>| {
                let out = BTreeMap::from([(Head::P2, x.clone())]);
                Ok(total_loss(&out, &strides, &a, &LossConfig::with_kind(kind))?.0)
            };
            assert!(grad_check(f, &x, 1e-4).unwrap() < 1e-3, "{kind}");
        }
    }

    #[test]
    fn loss_gradient_check_through_model_on_zero_image() {
        let cfg = ModelConfig {
            width_multiple: 0.25,
            ..ModelConfig::p2_only()
        };
        let model = ModelGraph::build(&cfg, 4).unwrap();
        let img = Tensor::<f64>::zeros(&[1, 1, 32, 32]);
        let strides: BTreeMap<Head, usize> = model.head_strides().into_iter().collect();
        let a = assign_targets(
            &[vec![target(9.0, 13.0, 4.0, 5.0)]],
            &HeadGrid::for_image(&model.head_strides(), 32, 32),
        )
        .unwrap();
        let name = "head_p2.pred.weight";
        let w0 = Ctx::<f64>::eval(model.store()).param(name).unwrap().detach();
        let f = |w: &Tensor<f64>| {
            let ctx = Ctx::<f64>::eval_with_grads(model.store()).with_override(name, w.clone());
            let out = model.forward_with(&ctx, &img)?;
            Ok(total_loss(&out, &strides, &a, &LossConfig::default())?.0)
        };
        let (l, _) = {
            let out = model.forward_with(&Ctx::<f64>::eval(model.store()), &img).unwrap();
            total_loss(&out, &strides, &a, &LossConfig::default()).unwrap()
        };
        assert!(l.item().is_finite() && l.item() > 0.0);
        assert!(grad_check(f, &w0, 1e-4).unwrap() < 1e-3);
    }

    #[test]
    fn gradient_reaches_every_active_parameter() {
        let cfg = ModelConfig {
            width_multiple: 0.25,
            ..ModelConfig::p2_only()
        };
        let model = ModelGraph::build(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f32>::new(&[2, 1, 32, 32], (0..2048).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let strides: BTreeMap<Head, usize> = model.head_strides().into_iter().collect();
        let a = assign_targets(
            &[vec![target(9.0, 13.0, 4.0, 5.0)], vec![target(20.0, 3.0, 3.0, 3.0)]],
            &HeadGrid::for_image(&model.head_strides(), 32, 32),
        )
        .unwrap();
        let ctx = Ctx::train(model.store());
        let out = model.forward_with(&ctx, &img).unwrap();
        total_loss(&out, &strides, &a, &LossConfig::default())
            .unwrap()
            .0
            .backward()
            .unwrap();
        let grads = ctx.grads();
        for name in model.store().names() {
            let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.iter().any(|v| *v != 0.0), "zero gradient for {name}");
        }
    }

    fn det(image_id: usize, class_id: usize, score: f64, cx: f64, cy: f64, s: f64) -> Detection {
        Detection {
            image_id,
            bbox: BBox::new(cx, cy, s, s),
            class_id,
            score,
        }
    }

    #[test]
    fn nms_examples() {
        let one = [det(0, 0, 0.7, 5.0, 5.0, 4.0)];
        assert_eq!(nms(&one, 0.45).unwrap(), one);
        let two = [det(0, 0, 0.8, 5.0, 5.0, 4.0), det(0, 0, 0.9, 5.0, 5.0, 4.0)];
        assert_eq!(nms(&two, 0.45).unwrap(), vec![two[1]]);
        let other_class = [det(0, 0, 0.8, 5.0, 5.0, 4.0), det(0, 1, 0.9, 5.0, 5.0, 4.0)];
        assert_eq!(nms(&other_class, 0.45).unwrap().len(), 2);
        assert!(nms(&one, 1.0).is_err());
        // equal scores: lower class, then left-most center, first
        let tied = [
            det(0, 1, 0.5, 1.0, 1.0, 2.0),
            det(0, 0, 0.5, 9.0, 1.0, 2.0),
            det(0, 0, 0.5, 3.0, 1.0, 2.0),
        ];
        let kept = nms(&tied, 0.45).unwrap();
        assert_eq!(kept.iter().map(|d| d.bbox.cx).collect::<Vec<_>>(), vec![3.0, 9.0, 1.0]);
    }

    /// O(n²) oracle: a detection survives iff no higher-ranked survivor of
    /// its class overlaps it above the threshold, evaluated by repeated
    /// fixed-point sweeps over all pairs.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut sorted = dets.to_vec();
        sorted.sort_by(rank_order);
        let n = sorted.len();
        let mut alive = vec![true; n];
        loop {
            let mut next = vec![true; n];
            for j in 0..n {
                for i in 0..j {
                    if alive[i]
                        && sorted[i].class_id == sorted[j].class_id
                        && iou(&sorted[i].bbox, &sorted[j].bbox) > thr
                    {
                        next[j] = false;
                    }
                }
            }
            if next == alive {
                break;
            }
            alive = next;
        }
        sorted
            .into_iter()
            .zip(alive)
            .filter(|(_, a)| *a)
            .map(|(d, _)| d)
            .collect()
    }

    proptest! {
        #[test]
        fn nms_matches_oracle_and_is_an_antichain(
            raw in prop::collection::vec((0usize..2, 0.01f64..0.99, 0.0f64..12.0, 0.0f64..12.0, 1.0f64..6.0), 1..6),
            thr in 0.1f64..0.9,
        ) {
            let dets: Vec<Detection> = raw.iter().map(|&(c, s, x, y, w)| det(0, c, s, x, y, w)).collect();
            let kept = nms(&dets, thr).unwrap();
            prop_assert_eq!(&kept, &nms_oracle(&dets, thr));
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
                }
            }
        }

        #[test]
        fn loss_is_non_negative(vals in prop::collection::vec(-6.0f64..6.0, 6 * 16)) {
            let out = BTreeMap::from([(Head::P2, Tensor::new(&[1, 6, 4, 4], vals).unwrap())]);
            let a = assign_targets(&[vec![target(3.0, 3.0, 2.0, 3.0)]], &[grid(Head::P2, 2, 8)]).unwrap();
            let strides = BTreeMap::from([(Head::P2, 2)]);
            let (loss, parts) = total_loss(&out, &strides, &a, &LossConfig::default()).unwrap();
            prop_assert!(loss.item() > 0.0);
            prop_assert!(parts.box_loss >= 0.0 && parts.obj > 0.0 && parts.cls > 0.0);
        }
    }

    #[test]
    fn decode_thresholds_and_ids() {
        let out = outputs_for(2, 8, 1, 0.0);
        // all logits 0 -> score 0.25 exactly
        let dets = decode(&out, &BTreeMap::from([(Head::P2, 2)]), 0.25, 10).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[1].len(), 16);
        assert!(dets[1].iter().all(|d| d.image_id == 11 && d.score == 0.25));
        assert!(decode(&out, &BTreeMap::from([(Head::P2, 2)]), 0.3, 0)
            .unwrap()
            .iter()
            .all(Vec::is_empty));
        assert!(decode(&out, &BTreeMap::from([(Head::P2, 2)]), 1.0, 0).is_err());
    }

    #[test]
    fn detections_csv_format() {
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &[det(3, 0, 0.5, 1.5, 2.0, 4.0)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "image_id,class_id,score,cx,cy,w,h\n3,0,0.5,1.5,2,4,4\n"
        );
    }
}
