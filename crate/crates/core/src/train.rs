//! End-to-end training: per-scene losses and gradients, Adam with a
//! per-epoch exponential decay, and an NDJSON loss log.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxgeom::BBox;
use crate::data::{SceneAnn, FRAME};
use crate::error::{Error, Result};
use crate::evalpipe::GT_SIGMA;
use crate::featmap::{attention_gt, FeatureGrid};
use crate::heatmap::gaussian_gt;
use crate::losses::{
    attn_loss_logits, box_to_heatmap_frame, det_loss, energy_loss, gaze_loss, positives, LossBundle, LossWeights,
};
use crate::network::{Network, NetworkConfig, HEAD_CLASSES};
use crate::nn::{Adam, Grads, Tensor};

/// Attention target spread in attention-grid cells.
pub const ATTN_SIGMA: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step; losses are averaged over the batch.
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            lr_decay: 0.94,
            seed: 0,
            weights: LossWeights::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::invalid(format!("lr={} lr_decay={} must be positive", self.lr, self.lr_decay)));
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        self.network.validate()
    }
}

/// One NDJSON record of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_det: f64,
    pub l_head: f64,
    pub l_attn: f64,
    pub l_gaze: f64,
    pub l_eng: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochLog {
    fn new(epoch: usize, b: &LossBundle, lr: f64) -> Self {
        EpochLog { epoch, l_det: b.l_det, l_head: b.l_head, l_attn: b.l_attn, l_gaze: b.l_gaze, l_eng: b.l_eng, total: b.total, lr }
    }
}

/// Everything the loss needs from one annotated scene.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<(BBox, usize)>,
    pub persons: Vec<PersonTarget>,
}

#[derive(Debug, Clone)]
pub struct PersonTarget {
    pub head: BBox,
    pub heatmap: Vec<f64>,
    pub attention: Vec<f64>,
    /// Gazed box in the heatmap frame.
    pub gaze_box: BBox,
}

impl Sample {
    pub fn new(image: Tensor, ann: &SceneAnn, cfg: &NetworkConfig) -> Result<Self> {
        let hs = cfg.heatmap_size;
        let persons = ann
            .gaze
            .iter()
            .map(|g| {
                let b = ann.gaze_box(g);
                Ok(PersonTarget {
                    head: ann.heads[g.head],
                    heatmap: gaussian_gt(g.point, hs, hs, GT_SIGMA, GT_SIGMA)?.values,
                    attention: attention_gt(g.point, cfg.attention_grid, ATTN_SIGMA)?,
                    gaze_box: box_to_heatmap_frame(&b, FRAME as f64, hs)
                        .ok_or_else(|| Error::invalid(format!("gaze box {b:?} degenerates in the heatmap frame")))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Sample { image, objects: ann.object_targets(), persons })
    }
}

/// Per-scene term values before weighting; `None` marks an absent term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneTerms {
    pub l_det: f64,
    pub l_head: f64,
    pub l_attn: Option<f64>,
    pub l_gaze: Option<f64>,
    pub l_eng: Option<f64>,
}

fn to_f32(g: &FeatureGrid<f64>, scale: f64) -> Tensor {
    Tensor { c: g.c, h: g.h, w: g.w, data: g.data.iter().map(|v| (v * scale) as f32).collect() }
}

/// Forward and backward for one scene. Gradients of each term are scaled
/// by its entry in `scale` (weight over batch count) and added to `grads`.
pub fn scene_step(net: &Network, s: &Sample, scale: [f64; 5], grads: &mut Grads) -> SceneTerms {
    let scene = net.forward_scene(&s.image);
    let cfg = &net.cfg;
    let heads: Vec<(BBox, usize)> = s.persons.iter().map(|p| (p.head, 0)).collect();
    let (det, _) = det_loss(&scene.object_raw(), &net.object_grid(), cfg.num_classes, &positives(&net.object_grid(), &s.objects));
    let (head, _) = det_loss(&scene.head_raw(), &net.head_grid(), HEAD_CLASSES, &positives(&net.head_grid(), &heads));

    let traces: Vec<_> = s.persons.iter().map(|p| net.forward_gaze(&scene, &p.head)).collect();
    let maps: Vec<Vec<f64>> = traces.iter().map(|t| t.heatmap().values).collect();
    let logits: Vec<Vec<f64>> = traces.iter().map(|t| t.logits_f64()).collect();
    let mrefs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
    let trefs: Vec<&[f64]> = s.persons.iter().map(|p| p.heatmap.as_slice()).collect();
    let lrefs: Vec<&[f64]> = logits.iter().map(|m| m.as_slice()).collect();
    let arefs: Vec<&[f64]> = s.persons.iter().map(|p| p.attention.as_slice()).collect();
    let boxes: Vec<BBox> = s.persons.iter().map(|p| p.gaze_box).collect();
    let gaze = gaze_loss(&mrefs, &trefs);
    let attn = attn_loss_logits(&lrefs, &arefs);
    let eng = energy_loss(&mrefs, cfg.heatmap_size, &boxes).map(|e| e.0);

    let mut d_se = Tensor::zeros(scene.se_reg.c, scene.se_reg.h, scene.se_reg.w);
    let mut d_gz = Tensor::zeros(scene.gaze_reg.c, scene.gaze_reg.h, scene.gaze_reg.w);
    for (k, t) in traces.iter().enumerate() {
        let mut dm = vec![0.0f64; maps[k].len()];
        if let Some(g) = &gaze {
            dm.iter_mut().zip(&g.grad[k]).for_each(|(a, b)| *a += scale[3] * b);
        }
        if let Some(e) = &eng {
            dm.iter_mut().zip(&e.grad[k]).for_each(|(a, b)| *a += scale[4] * b);
        }
        let dl: Vec<f32> = match &attn {
            Some(a) => a.grad[k].iter().map(|v| (v * scale[2]) as f32).collect(),
            None => vec![0.0; t.attn_logits.len()],
        };
        let dm: Vec<f32> = dm.into_iter().map(|v| v as f32).collect();
        let (a, b) = net.backward_gaze(&scene, t, &dm, &dl, grads);
        d_se.data.iter_mut().zip(&a.data).for_each(|(x, y)| *x += y);
        d_gz.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    }
    net.backward_scene(&scene, &to_f32(&det.grad, scale[0]), &to_f32(&head.grad, scale[1]), &d_se, &d_gz, grads);
    SceneTerms {
        l_det: det.value,
        l_head: head.value,
        l_attn: attn.map(|a| a.value),
        l_gaze: gaze.map(|g| g.value),
        l_eng: eng.map(|e| e.value),
    }
}

/// Runs one batch, leaving the batch-mean gradient of the weighted total in
/// `grads`. Absent terms are averaged over the scenes that have them.
pub fn batch_step(net: &Network, batch: &[&Sample], w: &LossWeights, grads: &mut Grads) -> LossBundle {
    grads.zero();
    let n = batch.len() as f64;
    let with_persons = batch.iter().filter(|s| !s.persons.is_empty()).count().max(1) as f64;
    let scale = [1.0 / n, 1.0 / n, w.alpha / with_persons, w.beta / with_persons, w.gamma / with_persons];
    let mut sum = [0.0; 5];
    let mut count = [0usize; 5];
    for s in batch {
        let t = scene_step(net, s, scale, grads);
        for (i, v) in [Some(t.l_det), Some(t.l_head), t.l_attn, t.l_gaze, t.l_eng].into_iter().enumerate() {
            if let Some(v) = v {
                sum[i] += v;
                count[i] += 1;
            }
        }
    }
    let m: Vec<f64> = (0..5).map(|i| if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 }).collect();
    LossBundle::new(m[0], m[1], m[2], m[3], m[4], *w)
}

fn check(b: &LossBundle, grads: &Grads) -> Result<()> {
    if let Some(term) = b.non_finite() {
        return Err(Error::NonFinite { term });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite { term: "gradient" });
    }
    Ok(())
}

/// Trains from scratch; calls `log` after every epoch with the mean of the
/// epoch's batch terms (the total recomputed from those means).
pub fn train(cfg: &TrainConfig, samples: &[Sample], mut log: impl FnMut(&EpochLog) -> Result<()>) -> Result<Network> {
    cfg.validate()?;
    let mut net = Network::new(cfg.network.clone(), cfg.seed);
    let mut adam = Adam::new(&net.params);
    let mut grads = Grads::zeros_like(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f0d);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let b = batch_step(&net, &batch, &cfg.weights, &mut grads);
            check(&b, &grads)?;
            adam.step(&mut net.params, &grads, lr as f32);
            for (a, v) in acc.iter_mut().zip([b.l_det, b.l_head, b.l_attn, b.l_gaze, b.l_eng]) {
                *a += v;
            }
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let mean = LossBundle::new(acc[0] / k, acc[1] / k, acc[2] / k, acc[3] / k, acc[4] / k, cfg.weights);
        log(&EpochLog::new(epoch, &mean, lr))?;
        lr *= cfg.lr_decay;
    }
    Ok(net)
}

/// Writes one log record as a JSON line.
pub fn write_log_line(w: &mut impl Write, rec: &EpochLog) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, image_to_tensor, GenParams};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            network: NetworkConfig {
                backbone_widths: vec![4, 4, 4, 8, 8],
                head_map_widths: vec![2, 2, 2, 2, 2],
                detector_hidden: 4,
                attention_hidden: 8,
                regressor_bottleneck: 8,
                decoder_widths: vec![4, 4, 4],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn samples(cfg: &NetworkConfig, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let s = generate_scene(3, i, &GenParams::default()).unwrap();
                Sample::new(image_to_tensor(&s.image), &s.ann, cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn weights_change_only_their_term() {
        let cfg = tiny_cfg();
        let net = Network::new(cfg.network.clone(), 1);
        let ss = samples(&cfg.network, 2);
        let batch: Vec<&Sample> = ss.iter().collect();
        let mut g = Grads::zeros_like(&net.params);
        let full = batch_step(&net, &batch, &LossWeights::default(), &mut g);
        let no_eng = batch_step(&net, &batch, &LossWeights { gamma: 0.0, ..Default::default() }, &mut g);
        let no_attn = batch_step(&net, &batch, &LossWeights { alpha: 0.0, ..Default::default() }, &mut g);
        for b in [&no_eng, &no_attn] {
            assert_eq!((b.l_det, b.l_head, b.l_attn, b.l_gaze, b.l_eng), (full.l_det, full.l_head, full.l_attn, full.l_gaze, full.l_eng));
        }
        assert_eq!(no_eng.total, full.l_det + full.l_head + 1.5 * full.l_attn + 1e4 * full.l_gaze);
        assert_eq!(no_attn.total, full.l_det + full.l_head + 1e4 * full.l_gaze + 10.0 * full.l_eng);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let ss = samples(&cfg.network, 3);
        let run = || {
            let mut logs = Vec::new();
            let net = train(&cfg, &ss, |r| {
                logs.push(r.clone());
                Ok(())
            })
            .unwrap();
            (logs, crate::network::checkpoint::to_bytes(&net).unwrap())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.len(), 2);
        assert!((a[1].lr - 1e-3 * 0.94).abs() < 1e-15);
    }
}
