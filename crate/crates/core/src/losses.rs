//! The five training losses with analytic gradients w.r.t. the network's
//! raw outputs, and a finite-difference verifier for each.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{ciou_loss_generic, BBox};
use crate::dual::{Dual, Real};
use crate::featmap::{rasterize_rect, FeatureGrid};
use crate::network::{assign_all, AnchorGrid, BOX_FIELDS};

/// Floor for probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.5, beta: 10000.0, gamma: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_det: f64,
    pub l_head: f64,
    pub l_attn: f64,
    pub l_gaze: f64,
    pub l_eng: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBundle {
    pub fn new(l_det: f64, l_head: f64, l_attn: f64, l_gaze: f64, l_eng: f64, weights: LossWeights) -> Self {
        let total = l_det + l_head + weights.alpha * l_attn + weights.beta * l_gaze + weights.gamma * l_eng;
        LossBundle { l_det, l_head, l_attn, l_gaze, l_eng, total, weights }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("l_det", self.l_det),
            ("l_head", self.l_head),
            ("l_attn", self.l_attn),
            ("l_gaze", self.l_gaze),
            ("l_eng", self.l_eng),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// A loss value and its gradient w.r.t. the scored input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored<G> {
    pub value: f64,
    pub grad: G,
}

/// One positive anchor and its target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub anchor: usize,
    pub target: BBox,
    pub class_id: usize,
}

/// Positive anchors: the max-IoU anchor of each ground truth, never shared.
pub fn positives(grid: &AnchorGrid, gts: &[(BBox, usize)]) -> Vec<Positive> {
    let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
    assign_all(&boxes, &grid.anchors())
        .into_iter()
        .map(|(g, anchor)| Positive { anchor, target: gts[g].0, class_id: gts[g].1 })
        .collect()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy on a logit: `-(y ln σ(z) + (1-y) ln(1-σ(z)))`.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Binary cross-entropy on a probability, with the log clamp.
pub fn bce_prob(p: f64, y: f64) -> f64 {
    -(y * p.max(LOG_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln())
}

/// Per-part detection loss values, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetParts {
    pub cls: f64,
    pub obj: f64,
    pub boxes: f64,
}

/// Anchor-detector loss: cross-entropy over class logits and CIoU over the
/// positives (averaged), plus objectness BCE averaged separately over the
/// positives and the negatives. `num_classes == 0` drops the class term.
pub fn det_loss(
    raw: &FeatureGrid<f64>,
    grid: &AnchorGrid,
    num_classes: usize,
    pos: &[Positive],
) -> (Scored<FeatureGrid<f64>>, DetParts) {
    let mut grad = FeatureGrid::zeros(raw.c, raw.h, raw.w);
    let mut parts = DetParts::default();
    let n = grid.len();
    let mut is_pos = vec![false; n];
    for p in pos {
        is_pos[p.anchor] = true;
    }
    let n_pos = pos.len();
    let n_neg = n - is_pos.iter().filter(|v| **v).count();
    let ch = |index: usize, field: usize| {
        let (row, col, a) = grid.locate(index);
        raw.idx(grid.channel(a, field, num_classes), row, col)
    };

    for (index, &p) in is_pos.iter().enumerate() {
        let k = ch(index, 4);
        let z = raw.data[k];
        let (y, norm) = if p { (1.0, n_pos) } else { (0.0, n_neg) };
        parts.obj += bce_logit(z, y) / norm as f64;
        grad.data[k] += (sigmoid(z) - y) / norm as f64;
    }

    for p in pos {
        let w = 1.0 / n_pos as f64;
        if num_classes > 0 {
            let ks: Vec<usize> = (0..num_classes).map(|c| ch(p.anchor, BOX_FIELDS + c)).collect();
            let z: Vec<f64> = ks.iter().map(|&k| raw.data[k]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let prob: Vec<f64> = e.iter().map(|v| v / s).collect();
            parts.cls += -prob[p.class_id].max(LOG_CLAMP).ln() * w;
            for (c, &k) in ks.iter().enumerate() {
                let y = if c == p.class_id { 1.0 } else { 0.0 };
                grad.data[k] += (prob[c] - y) * w;
            }
        }
        let t = grid.raw_offsets(raw, p.anchor, num_classes);
        let td: [Dual<4>; 4] = std::array::from_fn(|i| Dual::var(t[i], i));
        let g = p.target.to_array().map(Dual::<4>::cst);
        let l = ciou_loss_generic(grid.decode_box(p.anchor, td), g);
        parts.boxes += l.v * w;
        for f in 0..4 {
            grad.data[ch(p.anchor, f)] += l.d[f] * w;
        }
    }
    (Scored { value: parts.cls + parts.obj + parts.boxes, grad }, parts)
}

/// Mean squared error over the valid persons' heatmaps. `None` when no
/// person is valid (the term is absent).
pub fn gaze_loss(pred: &[&[f64]], target: &[&[f64]]) -> Option<Scored<Vec<Vec<f64>>>> {
    assert_eq!(pred.len(), target.len(), "one target per prediction");
    if pred.is_empty() {
        return None;
    }
    let cells: usize = pred.iter().map(|m| m.len()).sum();
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(m, t)| {
            assert_eq!(m.len(), t.len(), "heatmap sizes");
            m.iter()
                .zip(t.iter())
                .map(|(a, b)| {
                    let d = a - b;
                    value += d * d;
                    2.0 * d / cells as f64
                })
                .collect()
        })
        .collect();
    Some(Scored { value: value / cells as f64, grad })
}

/// Maps an image-frame box into the `size × size` heatmap frame.
pub fn box_to_heatmap_frame(b: &BBox, frame: f64, size: usize) -> Option<BBox> {
    b.scale(size as f64 / frame).ok()
}

/// Energy aggregation: per person `1 - mean(M over the gaze box)`, averaged
/// over persons whose box covers at least one cell. Returns the value, the
/// per-person gradients, and which persons were skipped.
pub fn energy_loss(maps: &[&[f64]], size: usize, boxes: &[BBox]) -> Option<(Scored<Vec<Vec<f64>>>, Vec<bool>)> {
    assert_eq!(maps.len(), boxes.len());
    let rects: Vec<_> = boxes.iter().map(|b| rasterize_rect(b, size, size)).collect();
    let used = rects.iter().filter(|r| r.is_some()).count();
    let skipped: Vec<bool> = rects.iter().map(|r| r.is_none()).collect();
    if used == 0 {
        return None;
    }
    let mut value = 0.0;
    let grad = maps
        .iter()
        .zip(&rects)
        .map(|(m, r)| {
            let mut g = vec![0.0; m.len()];
            if let Some(r) = r {
                let count = r.count() as f64;
                let mut sum = 0.0;
                for y in r.y0..r.y1 {
                    for x in r.x0..r.x1 {
                        sum += m[y * size + x];
                        g[y * size + x] = -1.0 / (count * used as f64);
                    }
                }
                value += 1.0 - sum / count;
            }
            g
        })
        .collect();
    Some((Scored { value: value / used as f64, grad }, skipped))
}

/// Attention cross-entropy on probabilities, normalized by persons and cells.
pub fn attn_loss(pred: &[&[f64]], target: &[&[f64]]) -> Option<f64> {
    if pred.is_empty() {
        return None;
    }
    let cells = pred[0].len();
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, a)| -a.iter().zip(p.iter()).map(|(a, p)| a * p.max(LOG_CLAMP).ln()).sum::<f64>())
        .sum();
    Some(total / (pred.len() * cells) as f64)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// [`attn_loss`] evaluated on attention logits, with the gradient w.r.t.
/// those logits.
pub fn attn_loss_logits(logits: &[&[f64]], target: &[&[f64]]) -> Option<Scored<Vec<Vec<f64>>>> {
    if logits.is_empty() {
        return None;
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let refs: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
    let value = attn_loss(&refs, target)?;
    let norm = (logits.len() * logits[0].len()) as f64;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(p, a)| {
            // dL/dp_i = -a_i / p_i unless the clamp is active.
            let dp: Vec<f64> = p.iter().zip(a.iter()).map(|(p, a)| if *p > LOG_CLAMP { -a / p / norm } else { 0.0 }).collect();
            let dot: f64 = p.iter().zip(&dp).map(|(p, d)| p * d).sum();
            p.iter().zip(&dp).map(|(p, d)| p * (d - dot)).collect()
        })
        .collect();
    Some(Scored { value, grad })
}

pub mod gradcheck {
    //! Central finite differences against every analytic gradient above.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::Serialize;

    use super::*;
    use crate::heatmap::GazePoint;

    pub const STEP: f64 = 1e-5;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
    #[serde(rename_all = "snake_case")]
    pub enum Term {
        Det,
        Head,
        Attn,
        Gaze,
        Eng,
    }

    impl Term {
        pub const ALL: [Term; 5] = [Term::Det, Term::Head, Term::Attn, Term::Gaze, Term::Eng];

        pub fn name(self) -> &'static str {
            match self {
                Term::Det => "l_det",
                Term::Head => "l_head",
                Term::Attn => "l_attn",
                Term::Gaze => "l_gaze",
                Term::Eng => "l_eng",
            }
        }

        /// Squared-error style terms are checked tighter than the cross-entropy ones.
        pub fn tolerance(self) -> f64 {
            match self {
                Term::Gaze | Term::Eng => 1e-4,
                Term::Det | Term::Head | Term::Attn => 1e-3,
            }
        }

        pub fn parse(s: &str) -> Option<Term> {
            Term::ALL.into_iter().find(|t| t.name() == s || t.name().trim_start_matches("l_") == s)
        }
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct TermReport {
        pub term: Term,
        pub max_rel_err: f64,
        pub tolerance: f64,
        pub checked: usize,
        pub pass: bool,
    }

    /// Relative error with a small absolute floor so near-zero gradients
    /// compare on an absolute scale.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
    }

    fn check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
        let mut worst = 0.0f64;
        let mut xs = x.to_vec();
        for i in 0..x.len() {
            let o = xs[i];
            xs[i] = o + STEP;
            let fp = f(&xs);
            xs[i] = o - STEP;
            let fm = f(&xs);
            xs[i] = o;
            worst = worst.max(rel_err(grad[i], (fp - fm) / (2.0 * STEP)));
        }
        worst
    }

    fn small_grid() -> AnchorGrid {
        AnchorGrid { grid: 4, stride: 16.0, sizes: vec![[20.0, 20.0], [30.0, 24.0]] }
    }

    fn rand_box(rng: &mut ChaCha8Rng, frame: f64) -> BBox {
        let w = rng.random_range(12.0..30.0);
        let h = rng.random_range(12.0..30.0);
        let x = rng.random_range(0.0..frame - w);
        let y = rng.random_range(0.0..frame - h);
        BBox::new(x, y, x + w, y + h).unwrap()
    }

    fn det_case(rng: &mut ChaCha8Rng, k: usize) -> (FeatureGrid<f64>, AnchorGrid, Vec<Positive>) {
        let grid = small_grid();
        let c = grid.per_cell() * (BOX_FIELDS + k);
        let data = (0..c * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw = FeatureGrid { c, h: 4, w: 4, data };
        let gts: Vec<(BBox, usize)> = (0..3).map(|_| (rand_box(rng, 64.0), rng.random_range(0..k.max(1)))).collect();
        let pos = positives(&grid, &gts);
        (raw, grid, pos)
    }

    fn term_error(term: Term, rng: &mut ChaCha8Rng, corrupt: bool) -> (f64, usize) {
        let bump = |g: &mut [f64]| {
            if corrupt {
                if let Some(v) = g.iter_mut().find(|v| v.abs() > 1e-3) {
                    *v *= 1.5;
                }
            }
        };
        match term {
            Term::Det | Term::Head => {
                let k = if term == Term::Det { 5 } else { 0 };
                let (raw, grid, pos) = det_case(rng, k);
                let (mut s, _) = det_loss(&raw, &grid, k, &pos);
                bump(&mut s.grad.data);
                let f = |x: &[f64]| {
                    let r = FeatureGrid { c: raw.c, h: raw.h, w: raw.w, data: x.to_vec() };
                    det_loss(&r, &grid, k, &pos).0.value
                };
                (check(&raw.data, &s.grad.data, f), raw.data.len())
            }
            Term::Gaze => {
                let m: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                let t: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                let tr: Vec<&[f64]> = t.iter().map(|v| v.as_slice()).collect();
                let mr: Vec<&[f64]> = m.iter().map(|v| v.as_slice()).collect();
                let mut s = gaze_loss(&mr, &tr).unwrap();
                let mut flat: Vec<f64> = s.grad.concat();
                bump(&mut flat);
                s.grad.clear();
                let f = |x: &[f64]| gaze_loss(&[&x[..64], &x[64..]], &tr).unwrap().value;
                (check(&m.concat(), &flat, f), 128)
            }
            Term::Eng => {
                let m: Vec<Vec<f64>> = (0..3).map(|_| (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
                let boxes: Vec<BBox> = (0..3).map(|_| rand_box(rng, 64.0).scale(0.25).unwrap()).collect();
                let mr: Vec<&[f64]> = m.iter().map(|v| v.as_slice()).collect();
                let (s, _) = energy_loss(&mr, 16, &boxes).unwrap();
                let mut flat: Vec<f64> = s.grad.concat();
                bump(&mut flat);
                let f = |x: &[f64]| energy_loss(&[&x[..256], &x[256..512], &x[512..]], 16, &boxes).unwrap().0.value;
                (check(&m.concat(), &flat, f), 768)
            }
            Term::Attn => {
                let z: Vec<Vec<f64>> = (0..2).map(|_| (0..49).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
                let a: Vec<Vec<f64>> = (0..2)
                    .map(|_| {
                        let q = GazePoint::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                        crate::featmap::attention_gt(q, 7, 0.35).unwrap()
                    })
                    .collect();
                let ar: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
                let zr: Vec<&[f64]> = z.iter().map(|v| v.as_slice()).collect();
                let s = attn_loss_logits(&zr, &ar).unwrap();
                let mut flat: Vec<f64> = s.grad.concat();
                bump(&mut flat);
                let f = |x: &[f64]| attn_loss_logits(&[&x[..49], &x[49..]], &ar).unwrap().value;
                (check(&z.concat(), &flat, f), 98)
            }
        }
    }

    /// Checks every term on `draws` random inputs derived from `seed`.
    /// `corrupt` scales one analytic gradient entry of that term by 1.5.
    pub fn run(seed: u64, draws: usize, corrupt: Option<Term>) -> Vec<TermReport> {
        Term::ALL
            .into_iter()
            .map(|term| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (term as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut worst = 0.0f64;
                let mut checked = 0;
                for _ in 0..draws {
                    let (e, n) = term_error(term, &mut rng, corrupt == Some(term));
                    worst = worst.max(e);
                    checked += n;
                }
                let tolerance = term.tolerance();
                TermReport { term, max_rel_err: worst, tolerance, checked, pass: worst <= tolerance }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spot_values() {
        assert_abs_diff_eq!(bce_logit(0.0, 0.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce_prob(0.5, 1.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce_prob(1.0, 1.0), 0.0, epsilon = 1e-12);
        assert!(bce_prob(0.0, 1.0).is_finite());
        let total = LossBundle::new(1.0, 1.0, 1.0, 1.0, 1.0, LossWeights::default()).total;
        assert_eq!(total, 10013.5);
        assert_eq!(LossBundle::new(0.0, 0.0, 0.0, 0.0, 0.0, LossWeights::default()).total, 0.0);
    }

    #[test]
    fn gaze_and_energy_closed_forms() {
        let t = vec![0.3; 64];
        let m: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert_abs_diff_eq!(gaze_loss(&[&m], &[&t]).unwrap().value, 0.01, epsilon = 1e-12);
        assert!(gaze_loss(&[], &[]).is_none());
        let b = BBox::new(2.0, 2.0, 6.0, 5.0).unwrap();
        for (v, want) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)] {
            let m = vec![v; 64];
            assert_abs_diff_eq!(energy_loss(&[&m], 8, &[b]).unwrap().0.value, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_closed_forms() {
        let a = crate::featmap::attention_gt(crate::heatmap::GazePoint::new(0.3, 0.6), 7, 0.35).unwrap();
        let u = vec![1.0 / 49.0; 49];
        assert_abs_diff_eq!(attn_loss(&[&u], &[&a]).unwrap() * 49.0, 49f64.ln(), epsilon = 1e-9);
        let mut one = vec![0.0; 49];
        one[10] = 1.0;
        let mut p = vec![0.1 / 48.0; 49];
        p[10] = 0.9;
        assert_abs_diff_eq!(attn_loss(&[&p], &[&one]).unwrap() * 49.0, -(0.9f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn uniform_class_logits_give_ln_k() {
        let grid = AnchorGrid { grid: 2, stride: 16.0, sizes: vec![[16.0, 16.0]] };
        let k = 24;
        let raw = FeatureGrid::zeros(BOX_FIELDS + k, 2, 2);
        let target = BBox::from_center(8.0, 8.0, 16.0, 16.0).unwrap();
        let pos = [Positive { anchor: 0, target, class_id: 3 }];
        let (_, parts) = det_loss(&raw, &grid, k, &pos);
        assert_abs_diff_eq!(parts.cls, 24f64.ln(), epsilon = 1e-12);
        let (_, none) = det_loss(&raw, &grid, k, &[]);
        assert_eq!((none.cls, none.boxes), (0.0, 0.0));
        assert_abs_diff_eq!(none.obj, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            for r in gradcheck::run(seed, 2, None) {
                assert!(r.pass, "{:?}: {}", r.term, r.max_rel_err);
            }
        }
        let bad = gradcheck::run(1, 1, Some(gradcheck::Term::Eng));
        assert!(bad.iter().all(|r| r.pass == (r.term != gradcheck::Term::Eng)));
    }
}
