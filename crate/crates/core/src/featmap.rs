//! Structural grid operations: the Defocus channel-to-space rearrangement
//! and its inverse, head location maps, and attention targets.

use crate::boxgeom::BBox;
use crate::error::{Error, Result};
use crate::heatmap::GazePoint;

/// Dense `channels × height × width` grid, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T = f32> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> FeatureGrid<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureGrid { c, h, w, data: vec![T::default(); c * h * w] }
    }
}

impl<T> FeatureGrid<T> {
    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 || data.len() != c * h * w {
            return Err(Error::invalid(format!(
                "grid {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(FeatureGrid { c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Pixel shuffle: `(C, H, W) -> (C/r², H·r, W·r)` with
/// `out[c, h·r+dy, w·r+dx] = in[c·r² + dy·r + dx, h, w]`.
pub fn defocus<T: Copy + Default>(x: &FeatureGrid<T>, r: usize) -> Result<FeatureGrid<T>> {
    if r == 0 || x.c % (r * r) != 0 {
        return Err(Error::invalid(format!("defocus: {} channels not divisible by r²={}", x.c, r * r)));
    }
    let (oc, oh, ow) = (x.c / (r * r), x.h * r, x.w * r);
    let mut out = FeatureGrid::zeros(oc, oh, ow);
    for c in 0..oc {
        for dy in 0..r {
            for dx in 0..r {
                let src = c * r * r + dy * r + dx;
                for h in 0..x.h {
                    for w in 0..x.w {
                        out.data[(c * oh + h * r + dy) * ow + w * r + dx] = x.data[(src * x.h + h) * x.w + w];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`defocus`] (space-to-depth with the same ordering).
pub fn refocus<T: Copy + Default>(x: &FeatureGrid<T>, r: usize) -> Result<FeatureGrid<T>> {
    if r == 0 || x.h % r != 0 || x.w % r != 0 {
        return Err(Error::invalid(format!("refocus: {}x{} not divisible by r={r}", x.h, x.w)));
    }
    let (oc, oh, ow) = (x.c * r * r, x.h / r, x.w / r);
    let mut out = FeatureGrid::zeros(oc, oh, ow);
    for c in 0..x.c {
        for dy in 0..r {
            for dx in 0..r {
                let dst = c * r * r + dy * r + dx;
                for h in 0..oh {
                    for w in 0..ow {
                        out.data[(dst * oh + h) * ow + w] = x.data[(c * x.h + h * r + dy) * x.w + w * r + dx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Half-open integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn count(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Pixels `[⌊x1⌋, ⌈x2⌉) × [⌊y1⌋, ⌈y2⌉)` clipped to a `width × height`
/// frame; `None` when nothing remains.
pub fn rasterize_rect(b: &BBox, width: usize, height: usize) -> Option<PixelRect> {
    let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let r = PixelRect {
        x0: clip(b.x1().floor(), width),
        y0: clip(b.y1().floor(), height),
        x1: clip(b.x2().ceil(), width),
        y1: clip(b.y2().ceil(), height),
    };
    (r.x0 < r.x1 && r.y0 < r.y1).then_some(r)
}

/// Binary head mask in the image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLocationMap {
    pub height: usize,
    pub width: usize,
    /// The 1-region, or `None` for an all-zero map.
    pub rect: Option<PixelRect>,
}

impl HeadLocationMap {
    pub fn ones(&self) -> usize {
        self.rect.map_or(0, |r| r.count())
    }

    /// True when a head was given but fell entirely outside the frame.
    pub fn is_empty(&self) -> bool {
        self.rect.is_none()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.rect.is_some_and(|r| col >= r.x0 && col < r.x1 && row >= r.y0 && row < r.y1)
    }

    pub fn to_grid(&self) -> FeatureGrid<f32> {
        let mut g = FeatureGrid::zeros(1, self.height, self.width);
        if let Some(r) = self.rect {
            for y in r.y0..r.y1 {
                g.data[y * self.width + r.x0..y * self.width + r.x1].fill(1.0);
            }
        }
        g
    }
}

pub fn rasterize_head_map(head: Option<&BBox>, height: usize, width: usize) -> HeadLocationMap {
    HeadLocationMap { height, width, rect: head.and_then(|b| rasterize_rect(b, width, height)) }
}

/// Gaussian over a `grid × grid` attention layout, normalized to sum 1.
/// `sigma` is in grid cells.
pub fn attention_gt(q: GazePoint, grid: usize, sigma: f64) -> Result<Vec<f64>> {
    if grid == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!("attention_gt: grid={grid}, sigma={sigma}")));
    }
    let (qx, qy) = (q.x * grid as f64, q.y * grid as f64);
    let mut a = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let dx = j as f64 + 0.5 - qx;
            let dy = i as f64 + 0.5 - qy;
            a.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= sum);
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(c: usize, h: usize, w: usize) -> FeatureGrid<f32> {
        FeatureGrid::from_vec(c, h, w, (0..c * h * w).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn defocus_identity_and_shape() {
        let x = seq(4, 2, 2);
        assert_eq!(defocus(&x, 1).unwrap(), x);
        let y = defocus(&x, 2).unwrap();
        assert_eq!(y.shape(), (1, 4, 4));
        // channel k lands at offset (k / 2, k % 2) inside each 2x2 block
        assert_eq!(y.data, vec![0., 4., 1., 5., 8., 12., 9., 13., 2., 6., 3., 7., 10., 14., 11., 15.]);
        assert_eq!(refocus(&y, 2).unwrap(), x);
    }

    #[test]
    fn divisibility_errors() {
        assert!(defocus(&seq(6, 3, 5), 2).is_err());
        assert!(refocus(&seq(8, 3, 5), 2).is_err());
    }

    #[test]
    fn head_map_counts() {
        let full = BBox::new(0.0, 0.0, 224.0, 224.0).unwrap();
        assert_eq!(rasterize_head_map(Some(&full), 224, 224).ones(), 224 * 224);
        let b = BBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let m = rasterize_head_map(Some(&b), 224, 224);
        assert_eq!(m.ones(), 400);
        assert_eq!(m.to_grid().data.iter().filter(|v| **v == 1.0).count(), 400);
        assert!(m.get(20, 10) && !m.get(40, 30) && !m.get(19, 10));
        let none = rasterize_head_map(None, 224, 224);
        assert_eq!(none.ones(), 0);
        let outside = BBox::new(300.0, 300.0, 310.0, 320.0).unwrap();
        assert!(rasterize_head_map(Some(&outside), 224, 224).is_empty());
    }

    #[test]
    fn attention_gt_properties() {
        let a = attention_gt(GazePoint::new(0.5, 0.5), 7, 0.35).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ratio = a[3 * 7 + 4] / a[3 * 7 + 3];
        assert!((ratio - (-1.0 / (2.0 * 0.35f64 * 0.35)).exp()).abs() < 1e-12);
        assert!((ratio - 0.0169).abs() < 1e-4);
        // q at the center of cell (1, 5)
        let b = attention_gt(GazePoint::new(5.5 / 7.0, 1.5 / 7.0), 7, 0.35).unwrap();
        let argmax = (0..49).max_by(|&i, &j| b[i].total_cmp(&b[j])).unwrap();
        assert_eq!(argmax, 7 + 5);
    }
}
