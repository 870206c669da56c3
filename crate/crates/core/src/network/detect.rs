//! Anchor grids, raw-output decoding and anchor assignment shared by the
//! object and head detectors.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, nms, BBox, Detection};
use crate::dual::Real;
use crate::featmap::FeatureGrid;

/// Per-anchor fields preceding the class logits: `tx, ty, tw, th, objectness`.
pub const BOX_FIELDS: usize = 5;
const MAX_LOG_SCALE: f64 = 8.0;

/// Anchors of fixed sizes centered on every cell of a square grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub grid: usize,
    pub stride: f64,
    /// Anchor `(width, height)` in image pixels.
    pub sizes: Vec<[f64; 2]>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.grid * self.grid * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col, anchor)` of a flat anchor index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let a = index % self.per_cell();
        let cell = index / self.per_cell();
        (cell / self.grid, cell % self.grid, a)
    }

    pub fn index(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.grid + col) * self.per_cell() + anchor
    }

    /// All anchor boxes in flat index order.
    pub fn anchors(&self) -> Vec<BBox> {
        (0..self.len())
            .map(|i| {
                let (row, col, a) = self.locate(i);
                let [w, h] = self.sizes[a];
                BBox::from_center((col as f64 + 0.5) * self.stride, (row as f64 + 0.5) * self.stride, w, h)
                    .expect("anchor sizes are positive")
            })
            .collect()
    }

    /// Channel of `field` for anchor slot `a` in a raw output grid.
    pub fn channel(&self, a: usize, field: usize, num_classes: usize) -> usize {
        a * (BOX_FIELDS + num_classes) + field
    }

    /// Decodes raw offsets into `[x1, y1, x2, y2]`: the center moves within
    /// `(-0.5, 1.5)` cells of the cell corner via `2σ(t) - 0.5`, the size
    /// scales the anchor by `exp(t)`.
    pub fn decode_box<T: Real>(&self, index: usize, t: [T; 4]) -> [T; 4] {
        let (row, col, a) = self.locate(index);
        let [aw, ah] = self.sizes[a];
        let s = T::cst(self.stride);
        let two = T::cst(2.0);
        let half = T::cst(0.5);
        let cx = (T::cst(col as f64) + two * t[0].sigmoid() - half) * s;
        let cy = (T::cst(row as f64) + two * t[1].sigmoid() - half) * s;
        let cap = T::cst(MAX_LOG_SCALE);
        let w = T::cst(aw) * t[2].min(cap).exp();
        let h = T::cst(ah) * t[3].min(cap).exp();
        [cx - w * half, cy - h * half, cx + w * half, cy + h * half]
    }

    /// Raw box offsets of one anchor.
    pub fn raw_offsets(&self, raw: &FeatureGrid<f64>, index: usize, num_classes: usize) -> [f64; 4] {
        let (row, col, a) = self.locate(index);
        let at = |f: usize| raw.data[raw.idx(self.channel(a, f, num_classes), row, col)];
        [at(0), at(1), at(2), at(3)]
    }

    pub fn predicted_box(&self, raw: &FeatureGrid<f64>, index: usize, num_classes: usize, frame: f64) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.decode_box(index, self.raw_offsets(raw, index, num_classes));
        BBox::new(x1.max(0.0), y1.max(0.0), x2.min(frame), y2.min(frame)).ok()
    }
}

/// Decodes every anchor above `conf_threshold`, then applies class-aware
/// NMS. Confidence is the sigmoid of the objectness logit; the class is
/// the argmax of the class logits (always 0 when `num_classes == 1`).
pub fn decode_detections(
    raw: &FeatureGrid<f64>,
    anchors: &AnchorGrid,
    num_classes: usize,
    frame: f64,
    conf_threshold: f64,
    nms_threshold: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for index in 0..anchors.len() {
        let (row, col, a) = anchors.locate(index);
        let at = |f: usize| raw.data[raw.idx(anchors.channel(a, f, num_classes), row, col)];
        let conf = 1.0 / (1.0 + (-at(4)).exp());
        if conf < conf_threshold {
            continue;
        }
        let class_id = if num_classes > 1 {
            (0..num_classes)
                .max_by(|&i, &j| at(BOX_FIELDS + i).total_cmp(&at(BOX_FIELDS + j)).then(j.cmp(&i)))
                .unwrap_or(0)
        } else {
            0
        };
        if let Some(bbox) = anchors.predicted_box(raw, index, num_classes, frame) {
            dets.push(Detection::new(bbox, class_id, conf));
        }
    }
    nms(&dets, nms_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub index: usize,
    pub iou: f64,
    /// True when the best anchor overlaps the ground truth by more than 0.5.
    pub valid: bool,
}

/// Max-IoU anchor for `gt`; ties keep the lowest index.
pub fn assign_anchor(gt: &BBox, anchors: &[BBox]) -> Option<Assignment> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in anchors.iter().enumerate() {
        let v = iou(gt, a);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(index, iou)| Assignment { index, iou, valid: iou > 0.5 })
}

/// Assigns each ground truth to its best anchor not already taken by an
/// earlier ground truth. Returns `(gt index, anchor index)` pairs.
pub fn assign_all(gts: &[BBox], anchors: &[BBox]) -> Vec<(usize, usize)> {
    let mut taken = vec![false; anchors.len()];
    let mut out = Vec::with_capacity(gts.len());
    for (g, gt) in gts.iter().enumerate() {
        let mut order: Vec<(usize, f64)> = anchors.iter().enumerate().map(|(i, a)| (i, iou(gt, a))).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1));
        if let Some(&(i, _)) = order.iter().find(|(i, _)| !taken[*i]) {
            taken[i] = true;
            out.push((g, i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> AnchorGrid {
        AnchorGrid { grid: 14, stride: 16.0, sizes: vec![[24.0, 24.0], [32.0, 32.0], [40.0, 40.0]] }
    }

    #[test]
    fn zero_logits_decode_to_anchor() {
        let g = grid();
        let idx = g.index(7, 7, 1);
        let b = g.decode_box(idx, [0.0; 4]);
        assert_eq!(b, [7.5 * 16.0 - 16.0, 7.5 * 16.0 - 16.0, 7.5 * 16.0 + 16.0, 7.5 * 16.0 + 16.0]);
        assert_eq!(BBox::new(b[0], b[1], b[2], b[3]).unwrap(), g.anchors()[idx]);
    }

    #[test]
    fn zero_logits_have_half_confidence() {
        let g = grid();
        let k = 24;
        let raw = FeatureGrid::<f64>::zeros(3 * (5 + k), 14, 14);
        assert!(decode_detections(&raw, &g, k, 224.0, 0.75, 0.5).is_empty());
        let all = decode_detections(&raw, &g, k, 224.0, 0.5, 1.0);
        assert_eq!(all.len(), g.len());
        assert!(all.iter().all(|d| d.confidence == 0.5));
    }

    #[test]
    fn single_firing_anchor() {
        let g = grid();
        let k = 1;
        let mut raw = FeatureGrid::<f64>::zeros(3 * 6, 14, 14);
        raw.data.iter_mut().for_each(|v| *v = -8.0);
        for c in 0..4 {
            for a in 0..3 {
                let ch = g.channel(a, c, k);
                raw.data.iter_mut().skip(ch * 196).take(196).for_each(|v| *v = 0.0);
            }
        }
        let ch = g.channel(1, 4, k);
        raw.data[ch * 196 + 7 * 14 + 7] = 6.0;
        let dets = decode_detections(&raw, &g, k, 224.0, 0.75, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, g.anchors()[g.index(7, 7, 1)]);
    }

    #[test]
    fn duplicate_anchors_suppressed() {
        let g = grid();
        let k = 1;
        let mut raw = FeatureGrid::<f64>::zeros(3 * 6, 14, 14);
        for a in 0..3 {
            let ch = g.channel(a, 4, k);
            raw.data.iter_mut().skip(ch * 196).take(196).for_each(|v| *v = -8.0);
        }
        // slots 1 and 2 at the same cell with nearly equal boxes
        raw.data[g.channel(1, 4, k) * 196 + 3 * 14 + 3] = 3.0;
        raw.data[g.channel(2, 4, k) * 196 + 3 * 14 + 3] = 2.0;
        raw.data[g.channel(2, 2, k) * 196 + 3 * 14 + 3] = (32.0f64 / 40.0).ln();
        raw.data[g.channel(2, 3, k) * 196 + 3 * 14 + 3] = (32.0f64 / 40.0).ln();
        let dets = decode_detections(&raw, &g, k, 224.0, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].confidence - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn assignment_rules() {
        let anchors = grid().anchors();
        let gt = anchors[100];
        let a = assign_anchor(&gt, &anchors).unwrap();
        assert_eq!((a.index, a.iou, a.valid), (100, 1.0, true));

        let small = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = [BBox::new(0.0, 0.0, 25.0, 10.0).unwrap(), BBox::new(0.0, 0.0, 10.0, 25.0).unwrap()];
        let a = assign_anchor(&small, &b).unwrap();
        assert_eq!(a.index, 0);
        assert!((a.iou - 0.4).abs() < 1e-12);
        assert!(!a.valid);
        assert!(assign_anchor(&small, &[]).is_none());
    }

    #[test]
    fn assign_all_avoids_collisions() {
        let anchors = grid().anchors();
        let gt = anchors[30];
        let pairs = assign_all(&[gt, gt], &anchors);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], (0, 30));
        assert_ne!(pairs[1].1, 30);
    }
}
