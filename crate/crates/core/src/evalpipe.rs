//! Dataset-level scoring: detection AP, gaze-object selection with the
//! mSoC/wUoC threshold sweep, point-level gaze metrics, gaze-instance mAP,
//! and ground-truth substitution modes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{iou, msoc, wuoc, BBox, Detection};
use crate::data::{Dataset, Object, FRAME};
use crate::error::{Error, Result};
use crate::featmap::rasterize_rect;
use crate::heatmap::{angle_err, auc, decode_gaze, gaussian_gt, l2_dist, GazePoint, Heatmap};
use crate::network::Network;

pub const REPORT_VERSION: &str = "evalreport-1";
pub const SAMPLES_VERSION: &str = "gazesamples-1";
/// Ground-truth heatmap spread in heatmap cells.
pub const GT_SIGMA: f64 = 3.0;
const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`, each computed as an exact decimal ratio.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// COCO-style 101-point interpolated AP of a confidence-ranked TP/FP list.
pub fn ap_101(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(ranked_tp.len());
    let mut rec = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &t) in ranked_tp.iter().enumerate() {
        tp += t as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        if let Some(i) = rec.iter().position(|&x| x >= r) {
            sum += prec[i];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Greedy confidence-ordered matching inside one image. Each detection
/// takes the unmatched ground truth of highest IoU (first on ties) when
/// that IoU reaches `thr`. Returns `(confidence, is_tp)` in ranked order.
pub fn match_image(dets: &[(BBox, f64)], gts: &[BBox], thr: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let v = iou(&dets[i].0, g);
                if !used[j] && v >= thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            (dets[i].1, best.is_some())
        })
        .collect()
}

/// Merges per-image ranked lists into one ranking; equal confidences keep
/// image order, then in-image rank.
fn rank(per_image: Vec<Vec<(f64, bool)>>) -> Vec<bool> {
    let mut all: Vec<(f64, usize, usize, bool)> = per_image
        .into_iter()
        .enumerate()
        .flat_map(|(img, v)| v.into_iter().enumerate().map(move |(r, (c, t))| (c, img, r, t)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|x| x.3).collect()
}

/// `(recall, precision)` after each ranked prediction.
pub fn pr_curve(ranked_tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            tp += t as usize;
            (if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 }, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Class-aware matching at `thr` pooled into one ranking over all classes;
/// returns the ranked TP flags and the GT count.
pub fn pooled_ranking(preds: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], thr: f64) -> (Vec<bool>, usize) {
    let n_gt = gts.iter().map(|g| g.len()).sum();
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let mut classes: Vec<usize> = p.iter().map(|d| d.class_id).collect();
            classes.sort_unstable();
            classes.dedup();
            let mut out = Vec::new();
            for c in classes {
                let d: Vec<(BBox, f64)> = p.iter().filter(|d| d.class_id == c).map(|d| (d.bbox, d.confidence)).collect();
                let gc: Vec<BBox> = g.iter().filter(|o| o.1 == c).map(|o| o.0).collect();
                out.extend(match_image(&d, &gc, thr));
            }
            out.sort_by(|a, b| b.0.total_cmp(&a.0));
            out
        })
        .collect();
    (rank(per_image), n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP averaged over IoU thresholds, per class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
    /// Classes predicted but absent from the ground truth; excluded from the mean.
    pub excluded: Vec<usize>,
}

pub fn class_ap(preds: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], class: usize, thr: f64) -> f64 {
    let mut n_gt = 0;
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let d: Vec<(BBox, f64)> = p.iter().filter(|d| d.class_id == class).map(|d| (d.bbox, d.confidence)).collect();
            let g: Vec<BBox> = g.iter().filter(|o| o.1 == class).map(|o| o.0).collect();
            n_gt += g.len();
            match_image(&d, &g, thr)
        })
        .collect();
    ap_101(&rank(per_image), n_gt)
}

pub fn eval_detection(preds: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>]) -> DetectionMetrics {
    assert_eq!(preds.len(), gts.len(), "one prediction list per image");
    let gt_classes: Vec<usize> = {
        let mut c: Vec<usize> = gts.iter().flatten().map(|g| g.1).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut excluded: Vec<usize> =
        preds.iter().flatten().map(|d| d.class_id).filter(|c| gt_classes.binary_search(c).is_err()).collect();
    excluded.sort_unstable();
    excluded.dedup();
    let ts = thresholds();
    let mut per_thr = [0.0; 10];
    let mut per_class = BTreeMap::new();
    for &c in &gt_classes {
        let aps: Vec<f64> = ts.iter().map(|&t| class_ap(preds, gts, c, t)).collect();
        for (acc, a) in per_thr.iter_mut().zip(&aps) {
            *acc += a;
        }
        per_class.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let n = gt_classes.len().max(1) as f64;
    per_thr.iter_mut().for_each(|v| *v /= n);
    DetectionMetrics {
        ap: per_thr.iter().sum::<f64>() / 10.0,
        ap50: per_thr[0],
        ap75: per_thr[5],
        per_class,
        excluded,
    }
}

/// How a heatmap picks one detection as the gazed object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Highest mean heatmap value over the box.
    #[default]
    MeanEnergy,
    /// A box containing the heatmap argmax.
    ArgmaxContainment,
}

/// Mean heatmap value over an image-frame box rasterized into the heatmap.
pub fn box_energy(m: &Heatmap, b: &BBox, frame: f64) -> f64 {
    let s = m.width as f64 / frame;
    let Some(r) = b.scale(s).ok().and_then(|b| rasterize_rect(&b, m.width, m.height)) else {
        return 0.0;
    };
    let mut sum = 0.0;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            sum += m.get(y, x);
        }
    }
    sum / r.count() as f64
}

/// Index of the selected detection; ties go to higher confidence, then
/// earlier input position.
pub fn select_gaze_object(dets: &[Detection], m: &Heatmap, frame: f64, rule: SelectionRule) -> Option<usize> {
    let energies: Vec<f64> = dets.iter().map(|d| box_energy(m, &d.bbox, frame)).collect();
    let candidates: Vec<usize> = match rule {
        SelectionRule::MeanEnergy => (0..dets.len()).collect(),
        SelectionRule::ArgmaxContainment => {
            let q = decode_gaze(m).point;
            (0..dets.len()).filter(|&i| dets[i].bbox.contains(q.x * frame, q.y * frame)).collect()
        }
    };
    let mut best: Option<usize> = None;
    for i in candidates {
        let better = match best {
            None => true,
            Some(b) => {
                energies[i] > energies[b] || (energies[i] == energies[b] && dets[i].confidence > dets[b].confidence)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// How the gaze-object candidate pool is built from the raw detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub rule: SelectionRule,
    /// Detections below this confidence never become the gazed object.
    pub candidate_threshold: f64,
    /// Class-agnostic NMS over the candidates, so one physical object
    /// predicted under two labels counts once.
    pub candidate_nms: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { rule: SelectionRule::MeanEnergy, candidate_threshold: 0.5, candidate_nms: 0.5 }
    }
}

impl EvalOptions {
    /// Confident detections after class-agnostic greedy NMS, in
    /// descending confidence with stable ties.
    pub fn candidates(&self, dets: &[Detection]) -> Vec<Detection> {
        let mut pool: Vec<Detection> = dets.iter().filter(|d| d.confidence >= self.candidate_threshold).copied().collect();
        pool.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut kept: Vec<Detection> = Vec::new();
        for d in pool {
            if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= self.candidate_nms) {
                kept.push(d);
            }
        }
        kept
    }
}

/// Fraction of samples at or above each threshold; missing samples count 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub headline: f64,
    pub at50: f64,
    pub at75: f64,
}

pub fn sweep(scores: &[f64]) -> Sweep {
    let ts = thresholds();
    let n = scores.len();
    let values: Vec<f64> = ts
        .iter()
        .map(|&t| if n == 0 { 0.0 } else { scores.iter().filter(|&&s| s >= t).count() as f64 / n as f64 })
        .collect();
    Sweep {
        thresholds: ts.to_vec(),
        headline: values.iter().sum::<f64>() / values.len() as f64,
        at50: values[0],
        at75: values[5],
        values,
    }
}

/// True-positive gate for a joint head-and-gaze prediction; all strict.
pub fn instance_tp(head_iou: f64, l2: f64, confidence: f64) -> bool {
    head_iou > 0.5 && l2 < 0.15 && confidence > 0.75
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstancePred {
    pub head: BBox,
    pub point: GazePoint,
    /// Confidence of the selected gaze object (0 when none).
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceGt {
    pub head: BBox,
    pub point: GazePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub map: f64,
    pub true_positives: usize,
    pub ground_truths: usize,
    /// Indices `(image, prediction)` of the true positives, with the matched GT.
    pub matches: Vec<(usize, usize, usize)>,
}

/// Each prediction, by confidence, takes the unmatched GT person of highest
/// head IoU; it is a TP when [`instance_tp`] holds against that person.
pub fn eval_gaze_instances(preds: &[Vec<InstancePred>], gts: &[Vec<InstanceGt>]) -> InstanceMetrics {
    let mut matches = Vec::new();
    let mut n_gt = 0;
    let per_image = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(img, (p, g))| {
            n_gt += g.len();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].confidence.total_cmp(&p[a].confidence));
            let mut used = vec![false; g.len()];
            order
                .into_iter()
                .map(|i| {
                    let best = (0..g.len())
                        .filter(|&j| !used[j])
                        .map(|j| (j, iou(&p[i].head, &g[j].head)))
                        .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                            Some((_, b)) if b >= v => acc,
                            _ => Some((j, v)),
                        });
                    let tp = best.is_some_and(|(j, v)| instance_tp(v, l2_dist(p[i].point, g[j].point), p[i].confidence));
                    if tp {
                        let j = best.unwrap().0;
                        used[j] = true;
                        matches.push((img, i, j));
                    }
                    (p[i].confidence, tp)
                })
                .collect()
        })
        .collect();
    let ranked = rank(per_image);
    InstanceMetrics { map: ap_101(&ranked, n_gt), true_positives: matches.len(), ground_truths: n_gt, matches }
}

/// Which parts of the gaze-object pipeline are replaced by ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Full,
    GtBox,
    GtHeatmap,
    Both,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [EvalMode::Full, EvalMode::GtBox, EvalMode::GtHeatmap, EvalMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::GtBox => "gt-box",
            EvalMode::GtHeatmap => "gt-heatmap",
            EvalMode::Both => "both",
        }
    }

    fn gt_boxes(self) -> bool {
        matches!(self, EvalMode::GtBox | EvalMode::Both)
    }

    fn gt_heatmap(self) -> bool {
        matches!(self, EvalMode::GtHeatmap | EvalMode::Both)
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown eval mode {s:?} (full, gt-box, gt-heatmap, both)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub gt_head: BBox,
    pub gt_point: GazePoint,
    pub gt_box: BBox,
    /// Predicted head matched to this person (IoU > 0.5).
    pub pred_head: Option<Detection>,
    pub pred_point: Option<GazePoint>,
    pub selected: Option<Detection>,
    /// Zero when nothing was selected.
    pub msoc: f64,
    pub wuoc: f64,
    pub auc: Option<f64>,
    pub l2: Option<f64>,
    pub angle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: usize,
    pub image: String,
    pub detections: Vec<Detection>,
    pub objects: Vec<Object>,
    pub persons: Vec<PersonRecord>,
    pub instances: Vec<InstancePred>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub msoc: f64,
    pub msoc50: f64,
    pub msoc75: f64,
    pub wuoc: f64,
    pub wuoc50: f64,
    pub wuoc75: f64,
    pub msoc_sweep: Vec<f64>,
    pub wuoc_sweep: Vec<f64>,
    pub auc: Option<f64>,
    pub l2: Option<f64>,
    pub angle: Option<f64>,
    pub gaze_map: f64,
    /// AUC and L2 over the gaze-instance true positives only.
    pub instance_auc: Option<f64>,
    pub instance_l2: Option<f64>,
    pub persons: usize,
    pub matched_persons: usize,
    pub detection: DetectionMetrics,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Recomputes every aggregate from per-scene records.
pub fn aggregate(records: &[SceneRecord]) -> Aggregates {
    let preds: Vec<Vec<Detection>> = records.iter().map(|r| r.detections.clone()).collect();
    let gts: Vec<Vec<(BBox, usize)>> = records.iter().map(|r| r.objects.iter().map(|o| (o.bbox, o.class_id)).collect()).collect();
    let detection = eval_detection(&preds, &gts);
    let persons: Vec<&PersonRecord> = records.iter().flat_map(|r| &r.persons).collect();
    let ms = sweep(&persons.iter().map(|p| p.msoc).collect::<Vec<_>>());
    let ws = sweep(&persons.iter().map(|p| p.wuoc).collect::<Vec<_>>());

    let ipreds: Vec<Vec<InstancePred>> = records.iter().map(|r| r.instances.clone()).collect();
    let igts: Vec<Vec<InstanceGt>> = records
        .iter()
        .map(|r| r.persons.iter().map(|p| InstanceGt { head: p.gt_head, point: p.gt_point }).collect())
        .collect();
    let inst = eval_gaze_instances(&ipreds, &igts);
    let tp_l2 = mean(inst.matches.iter().map(|&(i, p, g)| l2_dist(ipreds[i][p].point, igts[i][g].point)));
    // A TP's AUC is the person's heatmap AUC when that person's matched head is the TP.
    let tp_auc = mean(inst.matches.iter().filter_map(|&(i, _, g)| records[i].persons[g].auc));

    Aggregates {
        ap: detection.ap,
        ap50: detection.ap50,
        ap75: detection.ap75,
        msoc: ms.headline,
        msoc50: ms.at50,
        msoc75: ms.at75,
        wuoc: ws.headline,
        wuoc50: ws.at50,
        wuoc75: ws.at75,
        msoc_sweep: ms.values,
        wuoc_sweep: ws.values,
        auc: mean(persons.iter().filter_map(|p| p.auc)),
        l2: mean(persons.iter().filter_map(|p| p.l2)),
        angle: mean(persons.iter().filter_map(|p| p.angle)),
        gaze_map: inst.map,
        instance_auc: tp_auc,
        instance_l2: tp_l2,
        persons: persons.len(),
        matched_persons: persons.iter().filter(|p| p.pred_head.is_some()).count(),
        detection,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub mode: EvalMode,
    pub options: EvalOptions,
    pub aggregates: Aggregates,
    pub scenes: Vec<SceneRecord>,
}

impl EvalReport {
    pub fn from_records(mode: EvalMode, options: EvalOptions, scenes: Vec<SceneRecord>) -> Self {
        EvalReport {
            version: REPORT_VERSION.to_string(),
            mode,
            options,
            aggregates: aggregate(&scenes),
            scenes,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(format!("report: {e}")))?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("<missing>");
        if found != REPORT_VERSION {
            return Err(Error::Version { expected: REPORT_VERSION.into(), found: found.into() });
        }
        serde_json::from_value(v).map_err(|e| Error::Schema(format!("report: {e}")))
    }
}

/// Greedy head matching: predicted heads in confidence order each take the
/// unmatched GT person of highest IoU above 0.5.
pub fn match_heads(pred: &[Detection], gt: &[BBox]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].confidence.total_cmp(&pred[a].confidence));
    let mut out = vec![None; gt.len()];
    for i in order {
        let best = (0..gt.len())
            .filter(|&j| out[j].is_none())
            .map(|j| (j, iou(&pred[i].bbox, &gt[j])))
            .filter(|&(_, v)| v > 0.5)
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, _)) = best {
            out[j] = Some(i);
        }
    }
    out
}

/// Scores one scene given the model's detections and per-head heatmaps.
#[allow(clippy::too_many_arguments)]
pub fn score_scene(
    scene: usize,
    ann: &crate::data::SceneAnn,
    objects: Vec<Detection>,
    heads: &[Detection],
    heatmaps: &[Heatmap],
    mode: EvalMode,
    opts: &EvalOptions,
    heatmap_size: usize,
) -> Result<SceneRecord> {
    let frame = FRAME as f64;
    let rule = opts.rule;
    let pool = opts.candidates(&objects);
    let gt_heads: Vec<BBox> = ann.gaze.iter().map(|g| ann.heads[g.head]).collect();
    let matched = match_heads(heads, &gt_heads);
    let gt_dets: Vec<Detection> = ann.objects.iter().map(|o| Detection::new(o.bbox, o.class_id, 1.0)).collect();
    let mut persons = Vec::with_capacity(ann.gaze.len());
    for (k, g) in ann.gaze.iter().enumerate() {
        let gt_box = ann.gaze_box(g);
        let gt_head = gt_heads[k];
        let pred_head = matched[k].map(|i| heads[i]);
        let map = if mode.gt_heatmap() {
            Some(gaussian_gt(g.point, heatmap_size, heatmap_size, GT_SIGMA, GT_SIGMA)?)
        } else {
            matched[k].map(|i| heatmaps[i].clone())
        };
        let candidates = if mode.gt_boxes() { &gt_dets } else { &pool };
        let selected = map.as_ref().and_then(|m| select_gaze_object(candidates, m, frame, rule)).map(|i| candidates[i]);
        let (ms, ws) = selected.map_or((0.0, 0.0), |d| (msoc(&d.bbox, &gt_box), wuoc(&d.bbox, &gt_box)));
        let pred_point = map.as_ref().map(|m| decode_gaze(m).point);
        let (hx, hy) = gt_head.center();
        let head_c = GazePoint::new(hx / frame, hy / frame);
        persons.push(PersonRecord {
            gt_head,
            gt_point: g.point,
            gt_box,
            pred_head,
            pred_point,
            selected,
            msoc: ms,
            wuoc: ws,
            auc: map.as_ref().map(|m| auc(m, g.point)),
            l2: pred_point.map(|p| l2_dist(p, g.point)),
            angle: pred_point.and_then(|p| angle_err(head_c, p, g.point)),
        });
    }
    let instances = heads
        .iter()
        .zip(heatmaps)
        .map(|(h, m)| {
            let conf = select_gaze_object(&pool, m, frame, rule).map_or(0.0, |i| pool[i].confidence);
            InstancePred { head: h.bbox, point: decode_gaze(m).point, confidence: conf }
        })
        .collect();
    Ok(SceneRecord { scene, image: ann.image.clone(), detections: objects, objects: ann.objects.clone(), persons, instances })
}

/// Runs the network over a dataset and scores it under `mode`.
pub fn evaluate(net: &Network, ds: &Dataset, mode: EvalMode, opts: &EvalOptions) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(ds.len());
    for (i, ann) in ds.scenes.iter().enumerate() {
        let img = ds.load_image(i)?;
        let pred = net.infer(&img);
        let heads: Vec<Detection> = pred.persons.iter().map(|p| p.head).collect();
        let maps: Vec<Heatmap> = pred.persons.into_iter().map(|p| p.heatmap).collect();
        records.push(score_scene(i, ann, pred.objects, &heads, &maps, mode, opts, net.cfg.heatmap_size)?);
    }
    Ok(EvalReport::from_records(mode, *opts, records))
}

/// One paired sample for the standalone metrics command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    #[serde(default)]
    pub point: Option<GazePoint>,
    #[serde(default)]
    pub head: Option<BBox>,
    #[serde(default)]
    pub heatmap: Option<Heatmap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub version: String,
    pub samples: Vec<GazeSample>,
}

impl SampleFile {
    pub fn parse(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(format!("samples: {e}")))?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("<missing>");
        if found != SAMPLES_VERSION {
            return Err(Error::Version { expected: SAMPLES_VERSION.into(), found: found.into() });
        }
        serde_json::from_value(v).map_err(|e| Error::Schema(format!("samples: {e}")))
    }

    /// Ground-truth samples from an annotation file, one per gaze entry.
    pub fn from_annotations(scenes: &[crate::data::SceneAnn]) -> Self {
        let samples = scenes
            .iter()
            .flat_map(|s| {
                s.gaze.iter().map(move |g| GazeSample {
                    bbox: Some(s.gaze_box(g)),
                    point: Some(g.point),
                    head: Some(s.heads[g.head]),
                    heatmap: None,
                })
            })
            .collect();
        SampleFile { version: SAMPLES_VERSION.into(), samples }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub samples: usize,
    pub msoc: Sweep,
    pub wuoc: Sweep,
    pub auc: Option<f64>,
    pub l2: Option<f64>,
    pub angle: Option<f64>,
}

/// Sweeps and point metrics over paired prediction and GT samples. A
/// missing predicted box scores 0; point metrics use whatever is present.
pub fn sample_metrics(pred: &SampleFile, gt: &SampleFile) -> Result<SampleMetrics> {
    if pred.samples.len() != gt.samples.len() {
        return Err(Error::Schema(format!("{} predictions for {} ground-truth samples", pred.samples.len(), gt.samples.len())));
    }
    let mut ms = Vec::new();
    let mut ws = Vec::new();
    let (mut aucs, mut l2s, mut angles) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (p, g)) in pred.samples.iter().zip(&gt.samples).enumerate() {
        let gb = g.bbox.ok_or_else(|| Error::Record { index: i, message: "ground-truth sample has no box".into() })?;
        let (m, w) = p.bbox.map_or((0.0, 0.0), |b| (msoc(&b, &gb), wuoc(&b, &gb)));
        ms.push(m);
        ws.push(w);
        if let Some(q) = g.point {
            if let Some(h) = &p.heatmap {
                aucs.push(auc(h, q));
            }
            let pp = p.point.or_else(|| p.heatmap.as_ref().map(|h| decode_gaze(h).point));
            if let Some(pp) = pp {
                l2s.push(l2_dist(pp, q));
                if let Some(hb) = g.head.or(p.head) {
                    let (hx, hy) = hb.center();
                    let f = FRAME as f64;
                    if let Some(a) = angle_err(GazePoint::new(hx / f, hy / f), pp, q) {
                        angles.push(a);
                    }
                }
            }
        }
    }
    Ok(SampleMetrics {
        samples: ms.len(),
        msoc: sweep(&ms),
        wuoc: sweep(&ws),
        auc: mean(aucs.into_iter()),
        l2: mean(l2s.into_iter()),
        angle: mean(angles.into_iter()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn single_and_offset_detections() {
        let gt = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let good = vec![vec![Detection::new(b(0.0, 0.0, 10.0, 9.0), 0, 0.9)]];
        let m = eval_detection(&good, &gt);
        assert_eq!(m.ap50, 1.0);
        // IoU 0.6: counts at 0.50, 0.55, 0.60 only.
        let off = vec![vec![Detection::new(b(0.0, 0.0, 10.0, 6.0), 0, 0.9)]];
        let m = eval_detection(&off, &gt);
        assert_abs_diff_eq!(m.ap, 0.3, epsilon = 1e-12);
        let dup = vec![vec![Detection::new(b(0.0, 0.0, 10.0, 10.0), 0, 0.9), Detection::new(b(0.0, 0.0, 10.0, 10.0), 0, 0.8)]];
        let per = match_image(&dup[0].iter().map(|d| (d.bbox, d.confidence)).collect::<Vec<_>>(), &[gt[0][0].0], 0.5);
        assert_eq!(per, vec![(0.9, true), (0.8, false)]);
    }

    #[test]
    fn excluded_classes() {
        let gt = vec![vec![(b(0.0, 0.0, 10.0, 10.0), 0)]];
        let p = vec![vec![Detection::new(b(0.0, 0.0, 10.0, 10.0), 0, 0.9), Detection::new(b(20.0, 0.0, 30.0, 10.0), 5, 0.9)]];
        let m = eval_detection(&p, &gt);
        assert_eq!(m.excluded, vec![5]);
        assert_eq!(m.ap, 1.0);
    }

    #[test]
    fn selection_rules() {
        let m = {
            let mut v = vec![0.0; 64 * 64];
            v[10 * 64 + 10] = 1.0;
            Heatmap::new(64, 64, v).unwrap()
        };
        let inside = Detection::new(b(28.0, 28.0, 56.0, 56.0), 0, 0.5);
        let other = Detection::new(b(140.0, 140.0, 180.0, 180.0), 1, 0.9);
        let dets = [other, inside];
        assert_eq!(select_gaze_object(&dets, &m, 224.0, SelectionRule::MeanEnergy), Some(1));
        assert_eq!(select_gaze_object(&dets, &m, 224.0, SelectionRule::ArgmaxContainment), Some(1));
        assert_eq!(select_gaze_object(&dets[..1], &m, 224.0, SelectionRule::MeanEnergy), Some(0));
        assert_eq!(select_gaze_object(&[], &m, 224.0, SelectionRule::MeanEnergy), None);
        let flat = Heatmap::new(64, 64, vec![0.2; 64 * 64]).unwrap();
        let lo = Detection::new(b(0.0, 0.0, 40.0, 40.0), 0, 0.7);
        let hi = Detection::new(b(100.0, 100.0, 140.0, 140.0), 0, 0.9);
        assert_eq!(select_gaze_object(&[lo, hi], &flat, 224.0, SelectionRule::MeanEnergy), Some(1));
    }

    #[test]
    fn sweep_counts_thresholds() {
        let s = sweep(&[0.6]);
        assert_eq!(s.at50, 1.0);
        assert_eq!(s.at75, 0.0);
        assert_abs_diff_eq!(s.headline, 0.3, epsilon = 1e-12);
        assert!(s.values.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(sweep(&[1.0, 1.0]).headline, 1.0);
    }

    #[test]
    fn instance_gate_is_strict() {
        assert!(instance_tp(0.6, 0.1, 0.8));
        assert!(!instance_tp(0.6, 0.2, 0.8));
        assert!(!instance_tp(0.6, 0.1, 0.75));
        assert!(!instance_tp(0.5, 0.1, 0.8));
        assert!(!instance_tp(0.6, 0.15, 0.8));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EvalMode::ALL {
            assert_eq!(m.name().parse::<EvalMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
