//! Axis-aligned boxes, pairwise similarity measures and NMS.
//!
//! Boxes use continuous corner coordinates: `area = (x2 - x1) * (y2 - y1)`,
//! with no `+1` pixel inflation. Zero-area boxes cannot be constructed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{Error, Result};

/// A box with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Scales every coordinate by `s` (e.g. to move between frames).
    pub fn scale(&self, s: f64) -> Result<Self> {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    fn intersection_area(&self, o: &BBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    fn union_area(&self, o: &BBox) -> f64 {
        self.area() + o.area() - self.intersection_area(o)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A box with a class label and a confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, confidence: f64) -> Self {
        Detection { bbox, class_id, confidence }
    }
}

pub fn iou(p: &BBox, g: &BBox) -> f64 {
    p.intersection_area(g) / p.union_area(g)
}

/// Smallest axis-aligned box containing both inputs.
pub fn closure(p: &BBox, g: &BBox) -> BBox {
    BBox {
        x1: p.x1.min(g.x1),
        y1: p.y1.min(g.y1),
        x2: p.x2.max(g.x2),
        y2: p.y2.max(g.y2),
    }
}

/// Union over closure.
pub fn uoc(p: &BBox, g: &BBox) -> f64 {
    p.union_area(g) / closure(p, g).area()
}

/// UoC weighted by the smaller-to-larger area ratio.
pub fn wuoc(p: &BBox, g: &BBox) -> f64 {
    let (ap, ag) = (p.area(), g.area());
    uoc(p, g) * (ap / ag).min(ag / ap)
}

/// Mean similarity over candidates: `min(p/a, g/a) * (p ∪ g)/a` with `a`
/// the closure area. Equals 1 only for identical boxes.
pub fn msoc(p: &BBox, g: &BBox) -> f64 {
    let a = closure(p, g).area();
    (p.area() / a).min(g.area() / a) * (p.union_area(g) / a)
}

/// Complete-IoU loss over `[x1, y1, x2, y2]` corners, generic so the
/// detector losses can differentiate through it.
///
/// `1 - IoU + rho^2 / c^2 + alpha * v`, with `v` the aspect-ratio
/// consistency term and `alpha = v / ((1 - IoU) + v)`.
pub fn ciou_loss_generic<T: Real>(p: [T; 4], g: [T; 4]) -> T {
    let zero = T::cst(0.0);
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(zero);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(zero);
    let inter = iw * ih;
    let union = pw * ph + gw * gh - inter;
    let iou = inter / union;

    let dx = (p[0] + p[2]) - (g[0] + g[2]);
    let dy = (p[1] + p[3]) - (g[1] + g[3]);
    let rho2 = (dx * dx + dy * dy) / T::cst(4.0);
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let c2 = cw * cw + ch * ch;

    let da = (gw / gh).atan() - (pw / ph).atan();
    let v = T::cst(4.0 / (PI * PI)) * da * da;
    let denom = (T::cst(1.0) - iou) + v;
    let alpha_v = if denom.value() > 0.0 { v * v / denom } else { zero };

    T::cst(1.0) - iou + rho2 / c2 + alpha_v
}

pub fn ciou_loss(p: &BBox, g: &BBox) -> f64 {
    ciou_loss_generic(p.to_array(), g.to_array())
}

/// Class-aware greedy NMS. Output is sorted by descending confidence;
/// equal confidences keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0,0,0,0]").is_err());
    }

    #[test]
    fn closure_cases() {
        assert_eq!(closure(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)), b(0., 0., 2., 1.));
        assert_eq!(closure(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), b(0., 0., 3., 3.));
        let p = b(0.5, 1.0, 2.0, 4.0);
        assert_eq!(closure(&p, &p), p);
    }

    #[test]
    fn nms_cases() {
        let one = vec![Detection::new(b(0., 0., 1., 1.), 0, 0.3)];
        assert_eq!(nms(&one, 0.5), one);

        let dup = vec![
            Detection::new(b(0., 0., 2., 2.), 0, 0.8),
            Detection::new(b(0., 0., 2., 2.), 0, 0.9),
        ];
        let kept = nms(&dup, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let disjoint = vec![
            Detection::new(b(0., 0., 1., 1.), 0, 0.8),
            Detection::new(b(5., 5., 6., 6.), 0, 0.9),
        ];
        assert_eq!(nms(&disjoint, 0.5).len(), 2);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_is_class_aware_and_stable() {
        let dets = vec![
            Detection::new(b(0., 0., 2., 2.), 0, 0.7),
            Detection::new(b(0., 0., 2., 2.), 1, 0.7),
            Detection::new(b(0.1, 0., 2., 2.), 1, 0.7),
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept, vec![dets[0], dets[1]]);
    }
}
