//! Axis-aligned box algebra in normalized image coordinates.
//!
//! Boxes are stored in corner form `(x1, y1, x2, y2)` with `(x1, y1)` the
//! upper-left corner. Besides the plain IoU family this module carries the
//! covered-fraction overlap `|A ∩ B| / |B|` used to turn a region proposal
//! into per-token probabilities, and hand-derived gradients of the
//! overlap measures with respect to the first box so the region head can be
//! trained through them.

use serde::{Deserialize, Serialize};

/// Normalized rectangle, `0 <= x1 <= x2 <= 1` and `0 <= y1 <= y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Partial derivatives with respect to `(x1, y1, x2, y2)` of the first box.
pub type BoxGrad = [f64; 4];

impl BBox {
    pub const ZERO: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 0.0,
        y2: 0.0,
    };

    pub const FULL: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Converts a center-size box to corners, clipping to the unit square.
    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let clip = |v: f64| v.clamp(0.0, 1.0);
        BBox::new(
            clip(cx - 0.5 * w),
            clip(cy - 0.5 * h),
            clip(cx + 0.5 * w),
            clip(cy + 0.5 * h),
        )
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x1)
            && unit(self.y1)
            && unit(self.x2)
            && unit(self.y2)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU together with a flag that is set when the enclosing box
/// has zero area (the value is then 0 by convention).
pub fn giou_flagged(a: &BBox, b: &BBox) -> (f64, bool) {
    let enclosing = union_box(a, b).area();
    if enclosing <= 0.0 {
        return (0.0, true);
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    (iou - (enclosing - union) / enclosing, false)
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_flagged(a, b).0
}

/// Fraction of `b` covered by `a`; 0 when `b` has no area.
pub fn iou_hat(a: &BBox, b: &BBox) -> f64 {
    let area_b = b.area();
    if area_b <= 0.0 {
        0.0
    } else {
        a.intersection_area(b) / area_b
    }
}

/// Sum of absolute coordinate differences.
pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(p, q)| (p - q).abs())
        .sum()
}

// Intersection area and its gradient w.r.t. the corners of `a`.
fn intersection_with_grad(a: &BBox, b: &BBox) -> (f64, BoxGrad) {
    let raw_w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let raw_h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if raw_w <= 0.0 || raw_h <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let dx1 = if a.x1 >= b.x1 { -1.0 } else { 0.0 };
    let dx2 = if a.x2 <= b.x2 { 1.0 } else { 0.0 };
    let dy1 = if a.y1 >= b.y1 { -1.0 } else { 0.0 };
    let dy2 = if a.y2 <= b.y2 { 1.0 } else { 0.0 };
    (
        raw_w * raw_h,
        [dx1 * raw_h, dy1 * raw_w, dx2 * raw_h, dy2 * raw_w],
    )
}

fn area_grad(a: &BBox) -> BoxGrad {
    let w = a.x2 - a.x1;
    let h = a.y2 - a.y1;
    [-h, -w, h, w]
}

/// `iou_hat(a, b)` and its gradient with respect to `a`.
pub fn iou_hat_with_grad(a: &BBox, b: &BBox) -> (f64, BoxGrad) {
    let area_b = b.area();
    if area_b <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (inter, d_inter) = intersection_with_grad(a, b);
    (inter / area_b, d_inter.map(|g| g / area_b))
}

/// `giou(a, b)` and its gradient with respect to `a`. Degenerate enclosing
/// boxes give value 0 with zero gradient.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, BoxGrad) {
    let c = union_box(a, b);
    let c_area = c.area();
    if c_area <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (inter, d_inter) = intersection_with_grad(a, b);
    let d_area_a = area_grad(a);
    let union = a.area() + b.area() - inter;
    let mut d_union = [0.0; 4];
    for k in 0..4 {
        d_union[k] = d_area_a[k] - d_inter[k];
    }

    // Enclosing box: each side follows `a` when `a` is the extreme one.
    let cw = c.x2 - c.x1;
    let ch = c.y2 - c.y1;
    let dcx1 = if a.x1 <= b.x1 { -1.0 } else { 0.0 };
    let dcy1 = if a.y1 <= b.y1 { -1.0 } else { 0.0 };
    let dcx2 = if a.x2 >= b.x2 { 1.0 } else { 0.0 };
    let dcy2 = if a.y2 >= b.y2 { 1.0 } else { 0.0 };
    let d_c = [dcx1 * ch, dcy1 * cw, dcx2 * ch, dcy2 * cw];

    let mut grad = [0.0; 4];
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    for k in 0..4 {
        let d_iou = if union > 0.0 {
            (d_inter[k] * union - inter * d_union[k]) / (union * union)
        } else {
            0.0
        };
        // giou = iou - 1 + union / C
        grad[k] = d_iou + (d_union[k] * c_area - union * d_c[k]) / (c_area * c_area);
    }
    (iou - 1.0 + union / c_area, grad)
}

/// `l1_distance(a, b)` and its (sub)gradient with respect to `a`.
pub fn l1_with_grad(a: &BBox, b: &BBox) -> (f64, BoxGrad) {
    let pa = a.to_array();
    let pb = b.to_array();
    let mut grad = [0.0; 4];
    let mut total = 0.0;
    for k in 0..4 {
        let d = pa[k] - pb[k];
        total += d.abs();
        grad[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    (total, grad)
}
