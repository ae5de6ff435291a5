//! Box similarity measures and the regression losses built on them.
//!
//! Boxes are center-format `(cx, cy, w, h)` in pixels. The Gaussian
//! Wasserstein distance treats a box as a 2-D normal with mean `(cx, cy)` and
//! diagonal covariance `diag(w²/4, h²/4)`; for such Gaussians the squared
//! 2-Wasserstein distance reduces to a plain Euclidean distance between
//! `(cx, cy, w/2, h/2)` vectors. NWD maps that distance into `(0, 1]` with
//! `exp(-W/C)`.
//!
//! Each similarity has a `*_grad` companion returning the derivative with
//! respect to both boxes, used by the detection loss.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default NWD normalizer, in pixels.
pub const DEFAULT_NWD_C: f64 = 17.0;

/// Added under the square root when differentiating NWD so that the
/// derivative stays finite when the two boxes coincide.
const SQRT_GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Constructs a box, rejecting negative or non-finite fields.
    pub fn checked(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("box {self:?} has a non-finite field")));
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(Error::Validation(format!("box {self:?} has negative size")));
        }
        Ok(())
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    /// The Gaussian parameter vector `(cx, cy, w/2, h/2)`.
    fn gaussian_params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w / 2.0, self.h / 2.0]
    }
}

/// Which similarity a box loss is built on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Iou,
    Ciou,
    Nwd { c: f64 },
}

impl LossKind {
    pub fn nwd(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("NWD constant C must be > 0, got {c}")));
        }
        Ok(LossKind::Nwd { c })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LossKind::Iou => "iou",
            LossKind::Ciou => "ciou",
            LossKind::Nwd { .. } => "nwd",
        }
    }

    /// Similarity value in the metric's own range.
    pub fn similarity(&self, a: &BBox, b: &BBox) -> Result<f64> {
        match *self {
            LossKind::Iou => Ok(iou(a, b)),
            LossKind::Ciou => Ok(ciou(a, b)),
            LossKind::Nwd { c } => nwd(a, b, c),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// `iou`, `ciou`, `nwd` (C = 17) or `nwd:<C>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "iou" => Ok(LossKind::Iou),
            "ciou" => Ok(LossKind::Ciou),
            "nwd" => LossKind::nwd(DEFAULT_NWD_C),
            other => match other.strip_prefix("nwd:") {
                Some(c) => LossKind::nwd(
                    c.parse()
                        .map_err(|_| Error::invalid(format!("bad NWD constant in {other:?}")))?,
                ),
                None => Err(Error::invalid(format!("unknown box loss kind {other:?}"))),
            },
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Nwd { c } => write!(f, "nwd:{c}"),
            other => f.write_str(other.tag()),
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_grad(a, b).0
}

/// IoU and its derivative with respect to `a`'s `(cx, cy, w, h)`.
fn iou_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();

    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union;

    // d(iw)/d(cx, w) and d(ih)/d(cy, h) while the overlap is positive
    let (diw_dcx, diw_dw) = if iw_raw > 0.0 {
        let right = if ax2 <= bx2 { 1.0 } else { 0.0 };
        let left = if ax1 >= bx1 { 1.0 } else { 0.0 };
        (right - left, 0.5 * (right + left))
    } else {
        (0.0, 0.0)
    };
    let (dih_dcy, dih_dh) = if ih_raw > 0.0 {
        let bottom = if ay2 <= by2 { 1.0 } else { 0.0 };
        let top = if ay1 >= by1 { 1.0 } else { 0.0 };
        (bottom - top, 0.5 * (bottom + top))
    } else {
        (0.0, 0.0)
    };

    let d_inter = [ih * diw_dcx, iw * dih_dcy, ih * diw_dw, iw * dih_dh];
    let d_union = [-d_inter[0], -d_inter[1], a.h - d_inter[2], a.w - d_inter[3]];
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = (d_inter[i] * union - inter * d_union[i]) / (union * union);
    }
    (value, grad)
}

/// Complete IoU: `IoU - ρ²/c² - αv`, with `ρ` the center distance, `c` the
/// enclosing-box diagonal, `v = 4/π²·(atan(w_b/h_b) - atan(w_a/h_a))²` and
/// `α = v / ((1 - IoU) + v)`.
///
/// Two zero-size boxes at the same center have no enclosing diagonal; that
/// case returns 0 with both penalty terms dropped.
pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    ciou_grad_first(a, b).0
}

/// CIoU value with derivatives with respect to both boxes. The derivative
/// includes the dependence of `α` on the boxes.
pub fn ciou_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4], [f64; 4]) {
    let (value, ga) = ciou_grad_first(a, b);
    // CIoU is symmetric in its arguments
    let (_, gb) = ciou_grad_first(b, a);
    (value, ga, gb)
}

fn ciou_grad_first(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    if c2 <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (iou_v, d_iou) = iou_grad(a, b);

    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    let rho2 = dx * dx + dy * dy;
    let d_rho2 = [2.0 * dx, 2.0 * dy, 0.0, 0.0];

    let right = if ax2 >= bx2 { 1.0 } else { 0.0 };
    let left = if ax1 <= bx1 { 1.0 } else { 0.0 };
    let bottom = if ay2 >= by2 { 1.0 } else { 0.0 };
    let top = if ay1 <= by1 { 1.0 } else { 0.0 };
    let d_cw = [right - left, 0.0, 0.5 * (right + left), 0.0];
    let d_ch = [0.0, bottom - top, 0.0, 0.5 * (bottom + top)];
    let mut d_dist = [0.0; 4];
    for i in 0..4 {
        let d_c2 = 2.0 * cw * d_cw[i] + 2.0 * ch * d_ch[i];
        d_dist[i] = (d_rho2[i] * c2 - rho2 * d_c2) / (c2 * c2);
    }

    let k = 4.0 / (PI * PI);
    let angle_gap = b.w.atan2(b.h) - a.w.atan2(a.h);
    let v = k * angle_gap * angle_gap;
    let (mut aspect, mut d_aspect) = (0.0, [0.0; 4]);
    if v > 0.0 {
        let r2 = a.w * a.w + a.h * a.h;
        let dv = [
            0.0,
            0.0,
            -2.0 * k * angle_gap * a.h / r2,
            2.0 * k * angle_gap * a.w / r2,
        ];
        let denom = 1.0 - iou_v + v;
        aspect = v * v / denom;
        for i in 0..4 {
            d_aspect[i] = (2.0 * v * dv[i] * denom - v * v * (dv[i] - d_iou[i])) / (denom * denom);
        }
    }

    let value = iou_v - rho2 / c2 - aspect;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = d_iou[i] - d_dist[i] - d_aspect[i];
    }
    (value, grad)
}

/// Squared 2-Wasserstein distance between the Gaussians of two boxes.
pub fn wasserstein_sq(a: &BBox, b: &BBox) -> f64 {
    let (pa, pb) = (a.gaussian_params(), b.gaussian_params());
    pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Normalized Gaussian Wasserstein distance `exp(-sqrt(W²)/C)`.
pub fn nwd(a: &BBox, b: &BBox, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("NWD constant C must be > 0, got {c}")));
    }
    Ok((-wasserstein_sq(a, b).sqrt() / c).exp())
}

/// NWD with derivatives with respect to both boxes. The value is exact; the
/// derivative divides by `sqrt(W² + 1e-12)` so it is zero, not NaN, at `a == b`.
pub fn nwd_grad(a: &BBox, b: &BBox, c: f64) -> Result<(f64, [f64; 4], [f64; 4])> {
    let value = nwd(a, b, c)?;
    let (pa, pb) = (a.gaussian_params(), b.gaussian_params());
    let dist = (wasserstein_sq(a, b) + SQRT_GRAD_EPS).sqrt();
    let scale = -value / (c * dist);
    // chain factor from (w/2, h/2) back to (w, h)
    let chain = [1.0, 1.0, 0.5, 0.5];
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];
    for i in 0..4 {
        ga[i] = scale * (pa[i] - pb[i]) * chain[i];
        gb[i] = -ga[i];
    }
    Ok((value, ga, gb))
}

/// `1 - similarity(pred, gt)`.
pub fn box_loss(pred: &BBox, gt: &BBox, kind: LossKind) -> Result<f64> {
    Ok(box_loss_grad(pred, gt, kind)?.0)
}

/// Box loss and its derivative with respect to `pred`'s `(cx, cy, w, h)`.
pub fn box_loss_grad(pred: &BBox, gt: &BBox, kind: LossKind) -> Result<(f64, [f64; 4])> {
    let (sim, grad) = match kind {
        LossKind::Iou => iou_grad(pred, gt),
        LossKind::Ciou => ciou_grad_first(pred, gt),
        LossKind::Nwd { c } => {
            let (v, ga, _) = nwd_grad(pred, gt, c)?;
            (v, ga)
        }
    };
    Ok((1.0 - sim, grad.map(|g| -g)))
}

/// Cartesian offset grid, `dy`-major (rows) then `dx` (columns).
pub fn offset_grid(dxs: &[f64], dys: &[f64]) -> Vec<(f64, f64)> {
    dys.iter().flat_map(|&dy| dxs.iter().map(move |&dx| (dx, dy))).collect()
}

/// Similarity between `gt` and `gt` shifted by each offset, in grid order.
pub fn loss_landscape(gt: &BBox, offsets: &[(f64, f64)], kind: LossKind) -> Result<Vec<f64>> {
    if offsets.is_empty() {
        return Err(Error::invalid("loss landscape needs at least one offset"));
    }
    offsets
        .iter()
        .map(|&(dx, dy)| kind.similarity(gt, &gt.shifted(dx, dy)))
        .collect()
}

/// Writes `dx,dy,value` rows.
pub fn write_landscape_csv<W: Write>(mut out: W, offsets: &[(f64, f64)], values: &[f64]) -> std::io::Result<()> {
    writeln!(out, "dx,dy,value")?;
    for ((dx, dy), v) in offsets.iter().zip(values) {
        writeln!(out, "{dx},{dy},{v}")?;
    }
    Ok(())
}
