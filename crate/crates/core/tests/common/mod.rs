#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use gazebench::boxgeom::{BBox, Detection};
use gazebench::evalpipe::{InstanceGt, InstancePred};
use gazebench::heatmap::GazePoint;
use rand::Rng;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gazebench")
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("GAZEBENCH_SEED").output().expect("spawn gazebench")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Area-based IoU written out directly, independent of the library.
fn raw_iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / ua
}

/// Exhaustive all-pairs matcher with direct 101-point interpolation:
/// every recall level scans every rank for the best precision.
pub fn oracle_ap(preds: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], class: usize, thr: f64) -> f64 {
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        for (k, d) in p.iter().enumerate() {
            if d.class_id == class {
                flat.push((img, k));
            }
        }
    }
    // Stable: equal confidences keep (image, index) order.
    flat.sort_by(|a, b| preds[b.0][b.1].confidence.partial_cmp(&preds[a.0][a.1].confidence).unwrap());
    let n_gt: usize = gts.iter().map(|g| g.iter().filter(|o| o.1 == class).count()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let iou_table: Vec<Vec<Vec<f64>>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.iter().map(|d| g.iter().map(|o| raw_iou(&d.bbox, &o.0)).collect()).collect())
        .collect();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tps = Vec::new();
    for &(img, k) in &flat {
        let mut best: Option<usize> = None;
        for j in 0..gts[img].len() {
            if gts[img][j].1 != class || taken[img][j] || iou_table[img][k][j] < thr {
                continue;
            }
            if best.map_or(true, |b| iou_table[img][k][j] > iou_table[img][k][b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[img][j] = true;
        }
        tps.push(best.is_some());
    }
    let mut total = 0.0;
    for level in 0..101 {
        let r = level as f64 / 100.0;
        let mut best_p: f64 = 0.0;
        for i in 0..tps.len() {
            let tp = tps[..=i].iter().filter(|t| **t).count() as f64;
            if tp / n_gt as f64 >= r {
                best_p = best_p.max(tp / (i + 1) as f64);
            }
        }
        total += best_p;
    }
    total / 101.0
}

/// A micro-scene: one to three images, at most five GT and five
/// detections each, on a coarse grid so ties in IoU and confidence occur.
pub fn micro_scene<R: Rng>(rng: &mut R) -> (Vec<Vec<Detection>>, Vec<Vec<(BBox, usize)>>) {
    let images = rng.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let rand_box = |rng: &mut R| {
        let x = rng.random_range(0..6) as f64;
        let y = rng.random_range(0..6) as f64;
        bx(x, y, x + rng.random_range(1..4) as f64, y + rng.random_range(1..4) as f64)
    };
    for _ in 0..images {
        let g: Vec<(BBox, usize)> = (0..rng.random_range(0..=5)).map(|_| (rand_box(rng), rng.random_range(0..3))).collect();
        let d: Vec<Detection> = (0..rng.random_range(0..=5))
            .map(|_| {
                let b = if !g.is_empty() && rng.random_bool(0.6) {
                    let (gb, _) = g[rng.random_range(0..g.len())];
                    let dx = rng.random_range(-1..=1) as f64 * 0.5;
                    gb.translate(dx, 0.0).unwrap()
                } else {
                    rand_box(rng)
                };
                Detection::new(b, rng.random_range(0..3), rng.random_range(1..=5) as f64 / 5.0)
            })
            .collect();
        preds.push(d);
        gts.push(g);
    }
    (preds, gts)
}

/// Ten samples against `[0,0,10,10]` with hand-computed scores.
/// Returns `(pred_file, gt_file, msoc_row, wuoc_row)` with rows in percent.
pub fn sweep_fixture() -> (serde_json::Value, serde_json::Value, [f64; 10], [f64; 10]) {
    let g = [0.0, 0.0, 10.0, 10.0];
    let preds: Vec<Option<[f64; 4]>> = vec![
        Some(g),                      // 1.00 / 1.00
        Some([0.0, 0.0, 10.0, 9.2]),  // 0.92 / 0.92
        Some([0.0, 0.0, 10.0, 8.3]),  // 0.83 / 0.83
        Some([0.0, 0.0, 10.0, 7.7]),  // 0.77 / 0.77
        Some([0.0, 0.0, 10.0, 6.1]),  // 0.61 / 0.61
        Some([0.0, 0.0, 10.0, 5.2]),  // 0.52 / 0.52
        Some([0.0, 0.0, 10.0, 4.0]),  // 0.40 / 0.40
        Some([10.0, 0.0, 20.0, 10.0]), // adjacent equal box: 0.50 / 1.00
        None,                          // missing: 0 / 0
        Some([2.0, 2.0, 12.0, 12.0]), // (100/144)(136/144) ~ 0.656 / 136/144 ~ 0.944
    ];
    let sample = |b: Option<[f64; 4]>| serde_json::json!({ "box": b });
    let pred = serde_json::json!({ "version": "gazesamples-1", "samples": preds.iter().map(|b| sample(*b)).collect::<Vec<_>>() });
    let gt = serde_json::json!({ "version": "gazesamples-1", "samples": (0..10).map(|_| sample(Some(g))).collect::<Vec<_>>() });
    (
        pred,
        gt,
        [80.0, 60.0, 60.0, 50.0, 40.0, 40.0, 30.0, 20.0, 20.0, 10.0],
        [80.0, 70.0, 70.0, 60.0, 60.0, 60.0, 50.0, 40.0, 40.0, 20.0],
    )
}

// (iou case, l2 case, confidence, expected TP)
pub const TRUTH_TABLE: [(u8, u8, f64, bool); 9] = [
    (0, 0, 0.8, true),
    (2, 0, 0.8, false),
    (0, 2, 0.8, false),
    (0, 0, 0.5, false),
    (1, 0, 0.8, false),
    (0, 1, 0.8, false),
    (0, 0, 0.75, false),
    (2, 2, 0.8, false),
    (2, 2, 0.5, false),
];

/// `(head IoU, L2, confidence)` placements: each gate passes, fails, or sits
/// exactly on its strict boundary.
pub fn instance_case(iou_case: u8, l2_case: u8, conf: f64) -> (InstancePred, InstanceGt) {
    let gt_head = bx(0.0, 0.0, 6.0, 1.0);
    let head = match iou_case {
        0 => bx(0.0, 0.0, 10.0, 1.0), // 0.6
        1 => bx(0.0, 0.0, 12.0, 1.0), // 0.5
        _ => bx(0.0, 0.0, 20.0, 1.0), // 0.3
    };
    let gt_point = GazePoint::new(0.0, 0.0);
    let point = match l2_case {
        0 => GazePoint::new(0.1, 0.0),
        1 => GazePoint::new(0.15, 0.0),
        _ => GazePoint::new(0.2, 0.0),
    };
    (InstancePred { head, point, confidence: conf }, InstanceGt { head: gt_head, point: gt_point })
}
