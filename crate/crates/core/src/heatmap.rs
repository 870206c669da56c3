//! Gaze heatmaps: Gaussian ground truth, argmax decoding and the
//! point-level gaze metrics (AUC, L2 distance, angular error).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in unit-normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
}

impl GazePoint {
    pub fn new(x: f64, y: f64) -> Self {
        GazePoint { x, y }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

impl From<[f64; 2]> for GazePoint {
    fn from(a: [f64; 2]) -> Self {
        GazePoint::new(a[0], a[1])
    }
}

impl From<GazePoint> for [f64; 2] {
    fn from(p: GazePoint) -> Self {
        [p.x, p.y]
    }
}

/// Row-major `height × width` grid of non-negative values over the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid(format!(
                "heatmap {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("heatmap values must be finite and non-negative"));
        }
        Ok(Heatmap { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Heatmap { height, width, values: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Grid cell containing a unit-normalized point (clamped to the grid).
    pub fn cell_of(&self, q: GazePoint) -> (usize, usize) {
        let col = ((q.x * self.width as f64).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((q.y * self.height as f64).floor().max(0.0) as usize).min(self.height - 1);
        (row, col)
    }
}

/// Max-normalized Gaussian centered on `q`, sampled at cell centers.
/// Sigmas are in heatmap cells.
pub fn gaussian_gt(q: GazePoint, height: usize, width: usize, sigma_x: f64, sigma_y: f64) -> Result<Heatmap> {
    if !(sigma_x > 0.0 && sigma_y > 0.0) {
        return Err(Error::invalid(format!("gaussian sigmas must be positive, got ({sigma_x}, {sigma_y})")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("heatmap size must be at least 1x1"));
    }
    let (qx, qy) = (q.x * width as f64, q.y * height as f64);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma_x * sigma_y);
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let dy = (i as f64 + 0.5 - qy) / sigma_y;
        for j in 0..width {
            let dx = (j as f64 + 0.5 - qx) / sigma_x;
            values.push(norm * (-0.5 * (dx * dx + dy * dy)).exp());
        }
    }
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { height, width, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedGaze {
    pub point: GazePoint,
    /// Set when every cell holds the same value.
    pub degenerate: bool,
}

/// Argmax cell center in unit coordinates; the first cell in scan order wins ties.
pub fn decode_gaze(m: &Heatmap) -> DecodedGaze {
    let mut best = 0;
    for (i, v) in m.values.iter().enumerate() {
        if *v > m.values[best] {
            best = i;
        }
    }
    let first = m.values[0];
    let degenerate = m.values.iter().all(|v| *v == first);
    let (row, col) = (best / m.width, best % m.width);
    DecodedGaze {
        point: GazePoint::new((col as f64 + 0.5) / m.width as f64, (row as f64 + 0.5) / m.height as f64),
        degenerate,
    }
}

/// ROC AUC with the cell containing `q` as the single positive.
/// Ties count one half, which equals averaging over tie permutations.
pub fn auc(m: &Heatmap, q: GazePoint) -> f64 {
    let n = m.values.len();
    if n < 2 {
        return 0.5;
    }
    let (row, col) = m.cell_of(q);
    let pos_idx = row * m.width + col;
    let pos = m.values[pos_idx];
    let mut score = 0.0;
    for (i, v) in m.values.iter().enumerate() {
        if i == pos_idx {
            continue;
        }
        if *v < pos {
            score += 1.0;
        } else if *v == pos {
            score += 0.5;
        }
    }
    score / (n - 1) as f64
}

pub fn l2_dist(pred: GazePoint, gt: GazePoint) -> f64 {
    (pred.x - gt.x).hypot(pred.y - gt.y)
}

/// Angle in degrees between head→pred and head→gt; `None` when either
/// vector has zero length.
pub fn angle_err(head_center: GazePoint, pred: GazePoint, gt: GazePoint) -> Option<f64> {
    let (ax, ay) = (pred.x - head_center.x, pred.y - head_center.y);
    let (bx, by) = (gt.x - head_center.x, gt.y - head_center.y);
    let (na, nb) = (ax.hypot(ay), bx.hypot(by));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos = ((ax * bx + ay * by) / (na * nb)).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}
