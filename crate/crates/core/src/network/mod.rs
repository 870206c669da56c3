//! The head-free gaze object detector: a specific-general-specific feature
//! extractor, Defocus-enlarged object and head detectors, and a per-person
//! gaze heatmap regressor.

pub mod checkpoint;
pub mod config;
pub mod detect;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxgeom::{BBox, Detection};
use crate::featmap::{defocus, rasterize_head_map, refocus, FeatureGrid};
use crate::heatmap::Heatmap;
use crate::nn::ops::{
    concat_channels, leaky_relu, leaky_relu_backward, leaky_relu_vec, max_pool2, mul_spatial, mul_spatial_backward,
    sigmoid, softmax, softmax_backward, split_channels, upsample_nearest, upsample_nearest_backward,
};
use crate::nn::{Conv2d, ConvTranspose2d, Grads, Linear, ParamStore, SpatialResample, Tensor};

pub use config::{Enlarge, NetworkConfig};
pub use detect::{assign_all, assign_anchor, decode_detections, AnchorGrid, Assignment, BOX_FIELDS};

/// The head detector predicts boxes and objectness only.
pub const HEAD_CLASSES: usize = 0;
const INIT_PRIOR_LOGIT: f32 = -4.0;

/// Convolutions each followed by a leaky ReLU.
#[derive(Debug, Clone)]
struct ConvChain {
    convs: Vec<Conv2d>,
}

impl ConvChain {
    fn strided(ps: &mut ParamStore, name: &str, cin: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut c = cin;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(ps, &format!("{name}.{i}"), c, w, 3, 2, 1, rng);
                c = w;
                conv
            })
            .collect();
        ConvChain { convs }
    }

    /// Activations including the input at index 0.
    fn forward(&self, ps: &ParamStore, x: Tensor) -> Vec<Tensor> {
        let mut acts = vec![x];
        for c in &self.convs {
            let y = leaky_relu(c.forward(ps, acts.last().unwrap()));
            acts.push(y);
        }
        acts
    }

    fn backward(&self, ps: &ParamStore, acts: &[Tensor], mut dy: Tensor, grads: &mut Grads, need_dx: bool) -> Option<Tensor> {
        for (i, c) in self.convs.iter().enumerate().rev() {
            leaky_relu_backward(&acts[i + 1].data, &mut dy.data);
            match c.backward(ps, &acts[i], &dy, grads, i > 0 || need_dx) {
                Some(d) => dy = d,
                None => return None,
            }
        }
        Some(dy)
    }
}

fn add_into(acc: &mut Tensor, d: &Tensor) {
    assert_eq!(acc.data.len(), d.data.len());
    acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
}

fn to_f64(t: &Tensor) -> FeatureGrid<f64> {
    FeatureGrid { c: t.c, h: t.h, w: t.w, data: t.data.iter().map(|v| *v as f64).collect() }
}

/// One detector: independent 1×1 projection, enlargement, hidden conv, output.
#[derive(Debug, Clone)]
struct DetectorBranch {
    project: Conv2d,
    hidden: Conv2d,
    out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DetectorTrace {
    pub projected: Tensor,
    pub enlarged: Tensor,
    pub hidden: Tensor,
    pub raw: Tensor,
}

impl DetectorBranch {
    fn new(ps: &mut ParamStore, name: &str, cfg: &NetworkConfig, hidden: usize, out_per_anchor: usize, anchors: usize, rng: &mut ChaCha8Rng) -> Self {
        let cb = cfg.backbone_channels();
        let project = Conv2d::new(ps, &format!("{name}.project"), cb, cb, 1, 1, 0, rng);
        let hid = Conv2d::new(ps, &format!("{name}.hidden"), cfg.detector_channels(), hidden, 3, 1, 1, rng);
        let out = Conv2d::new(ps, &format!("{name}.out"), hidden, anchors * out_per_anchor, 1, 1, 0, rng);
        // Scale down the output layer and start with a low objectness prior.
        for w in ps.get_mut(out.weight) {
            *w *= 0.1;
        }
        let bias = ps.get_mut(out.bias);
        for a in 0..anchors {
            bias[a * out_per_anchor + 4] = INIT_PRIOR_LOGIT;
        }
        DetectorBranch { project, hidden: hid, out }
    }

    fn forward(&self, ps: &ParamStore, cfg: &NetworkConfig, f: &Tensor) -> DetectorTrace {
        let projected = leaky_relu(self.project.forward(ps, f));
        let enlarged = match cfg.enlarge {
            Enlarge::Defocus => defocus(&projected, cfg.defocus_ratio).expect("validated channel count"),
            Enlarge::Nearest => upsample_nearest(&projected, cfg.defocus_ratio),
        };
        let hidden = leaky_relu(self.hidden.forward(ps, &enlarged));
        let raw = self.out.forward(ps, &hidden);
        DetectorTrace { projected, enlarged, hidden, raw }
    }

    fn backward(&self, ps: &ParamStore, cfg: &NetworkConfig, f: &Tensor, t: &DetectorTrace, draw: &Tensor, grads: &mut Grads) -> Tensor {
        let mut dh = self.out.backward(ps, &t.hidden, draw, grads, true).unwrap();
        leaky_relu_backward(&t.hidden.data, &mut dh.data);
        let de = self.hidden.backward(ps, &t.enlarged, &dh, grads, true).unwrap();
        let mut dp = match cfg.enlarge {
            Enlarge::Defocus => refocus(&de, cfg.defocus_ratio).expect("enlarged grid is divisible"),
            Enlarge::Nearest => upsample_nearest_backward(&de, cfg.defocus_ratio),
        };
        leaky_relu_backward(&t.projected.data, &mut dp.data);
        self.project.backward(ps, f, &dp, grads, true).unwrap()
    }
}

/// Everything the scene-level backward pass needs.
#[derive(Debug, Clone)]
pub struct SceneTrace {
    pub se_in: Vec<Tensor>,
    pub gaze_in: Vec<Tensor>,
    pub se_backbone: Vec<Tensor>,
    pub gaze_backbone: Vec<Tensor>,
    pub object: DetectorTrace,
    pub head: DetectorTrace,
    pub se_reg: Tensor,
    pub gaze_reg: Tensor,
}

impl SceneTrace {
    pub fn f_se(&self) -> &Tensor {
        self.se_backbone.last().unwrap()
    }

    pub fn f_gaze(&self) -> &Tensor {
        self.gaze_backbone.last().unwrap()
    }

    pub fn object_raw(&self) -> FeatureGrid<f64> {
        to_f64(&self.object.raw)
    }

    pub fn head_raw(&self) -> FeatureGrid<f64> {
        to_f64(&self.head.raw)
    }
}

/// Everything the per-person backward pass needs.
#[derive(Debug, Clone)]
pub struct GazeTrace {
    pub head_acts: Vec<Tensor>,
    pub attn_in: Vec<f32>,
    pub g_red: Tensor,
    pub attn_hidden: Vec<f32>,
    pub attn_logits: Vec<f32>,
    pub attention: Vec<f32>,
    pub f_scene: Tensor,
    pub fused: Tensor,
    pub enc: Tensor,
    pub resampled: Tensor,
    pub decoder: Vec<Tensor>,
    pub heatmap: Tensor,
}

impl GazeTrace {
    pub fn heatmap(&self) -> Heatmap {
        Heatmap::new(self.heatmap.h, self.heatmap.w, self.heatmap.data.iter().map(|v| *v as f64).collect())
            .expect("decoder output matches its shape")
    }

    pub fn attention_f64(&self) -> Vec<f64> {
        self.attention.iter().map(|v| *v as f64).collect()
    }

    pub fn logits_f64(&self) -> Vec<f64> {
        self.attn_logits.iter().map(|v| *v as f64).collect()
    }
}

#[derive(Debug, Clone)]
struct GazeRegressor {
    head: ConvChain,
    reduce: Conv2d,
    attn1: Linear,
    attn2: Linear,
    encoder: Conv2d,
    resample: SpatialResample,
    deconvs: Vec<ConvTranspose2d>,
    out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct PersonPrediction {
    pub head: Detection,
    pub heatmap: Heatmap,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub objects: Vec<Detection>,
    pub persons: Vec<PersonPrediction>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
    se_in: ConvChain,
    gaze_in: ConvChain,
    backbone: ConvChain,
    backbone_gaze: Option<ConvChain>,
    object: DetectorBranch,
    head: DetectorBranch,
    se_reg: Conv2d,
    gaze_reg: Conv2d,
    gaze: GazeRegressor,
}

impl Network {
    /// Builds a network with seeded He initialization. Panics on an invalid
    /// config; call [`NetworkConfig::validate`] first for untrusted input.
    pub fn new(cfg: NetworkConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid network config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let rng = &mut rng;
        let ic = cfg.input_channels;
        let cb = cfg.backbone_channels();
        let single = |ps: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| ConvChain {
            convs: vec![Conv2d::new(ps, name, 3, ic, 3, 1, 1, rng)],
        };
        let se_in = single(&mut ps, "sgs.se_in", rng);
        let gaze_in = single(&mut ps, "sgs.gaze_in", rng);
        let backbone = ConvChain::strided(&mut ps, "sgs.backbone", ic, &cfg.backbone_widths, rng);
        let backbone_gaze =
            (!cfg.share_backbone).then(|| ConvChain::strided(&mut ps, "sgs.backbone_gaze", ic, &cfg.backbone_widths, rng));
        let object = DetectorBranch::new(
            &mut ps,
            "det.obj",
            &cfg,
            cfg.detector_hidden,
            BOX_FIELDS + cfg.num_classes,
            cfg.object_anchors.len(),
            rng,
        );
        let head = DetectorBranch::new(
            &mut ps,
            "det.head",
            &cfg,
            cfg.detector_channels(),
            BOX_FIELDS + HEAD_CLASSES,
            cfg.head_anchors.len(),
            rng,
        );
        let se_reg = Conv2d::new(&mut ps, "sgs.se_reg", cb, cb, 3, 1, 1, rng);
        let gaze_reg = Conv2d::new(&mut ps, "sgs.gaze_reg", cb, cb, 3, 1, 1, rng);

        let g = cfg.attention_grid;
        let hm_c = *cfg.head_map_widths.last().unwrap();
        let head_chain = ConvChain::strided(&mut ps, "gaze.head", 1, &cfg.head_map_widths, rng);
        let reduce = Conv2d::new(&mut ps, "gaze.reduce", cb, cfg.gaze_reduce, 1, 1, 0, rng);
        let pool = cfg.head_pool_size();
        let attn_in = pool * pool + cfg.gaze_reduce * g * g;
        let attn1 = Linear::new(&mut ps, "gaze.attn1", attn_in, cfg.attention_hidden, rng);
        let attn2 = Linear::new(&mut ps, "gaze.attn2", cfg.attention_hidden, g * g, rng);
        // Small logits so attention starts near uniform.
        for w in ps.get_mut(attn2.weight) {
            *w *= 0.1;
        }
        let fused = cb + hm_c + cb;
        let encoder = Conv2d::new(&mut ps, "gaze.encoder", fused, cfg.regressor_bottleneck, 1, 1, 0, rng);
        let e = cfg.decoder_entry();
        let resample = SpatialResample::new(&mut ps, "gaze.resample", (g, g), (e, e), rng);
        let mut c = cfg.regressor_bottleneck;
        let deconvs = cfg
            .decoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = ConvTranspose2d::new(&mut ps, &format!("gaze.deconv.{i}"), c, w, 4, 2, 1, rng);
                c = w;
                d
            })
            .collect();
        let out = Conv2d::new(&mut ps, "gaze.out", c, 1, 1, 1, 0, rng);
        ps.get_mut(out.bias)[0] = INIT_PRIOR_LOGIT;
        let gaze = GazeRegressor { head: head_chain, reduce, attn1, attn2, encoder, resample, deconvs, out };

        Network { cfg, params: ps, se_in, gaze_in, backbone, backbone_gaze, object, head, se_reg, gaze_reg, gaze }
    }

    pub fn object_grid(&self) -> AnchorGrid {
        self.cfg.object_grid()
    }

    pub fn head_grid(&self) -> AnchorGrid {
        self.cfg.head_grid()
    }

    fn gaze_backbone(&self) -> &ConvChain {
        self.backbone_gaze.as_ref().unwrap_or(&self.backbone)
    }

    /// Scene-level forward pass on a normalized `3 × S × S` image.
    pub fn forward_scene(&self, image: &Tensor) -> SceneTrace {
        let ps = &self.params;
        assert_eq!((image.c, image.h, image.w), (3, self.cfg.input_size, self.cfg.input_size), "input shape");
        let se_in = self.se_in.forward(ps, image.clone());
        let gaze_in = self.gaze_in.forward(ps, image.clone());
        let se_backbone = self.backbone.forward(ps, se_in[1].clone());
        let gaze_backbone = self.gaze_backbone().forward(ps, gaze_in[1].clone());
        let f_se = se_backbone.last().unwrap();
        let f_gaze = gaze_backbone.last().unwrap();
        let object = self.object.forward(ps, &self.cfg, f_se);
        let head = self.head.forward(ps, &self.cfg, f_se);
        let se_reg = leaky_relu(self.se_reg.forward(ps, f_se));
        let gaze_reg = leaky_relu(self.gaze_reg.forward(ps, f_gaze));
        SceneTrace { se_in, gaze_in, se_backbone, gaze_backbone, object, head, se_reg, gaze_reg }
    }

    /// Per-person forward pass from a head box in image pixels.
    pub fn forward_gaze(&self, scene: &SceneTrace, head_box: &BBox) -> GazeTrace {
        let s = self.cfg.input_size;
        let map = rasterize_head_map(Some(head_box), s, s).to_grid();
        self.forward_gaze_map(scene, map)
    }

    pub fn forward_gaze_map(&self, scene: &SceneTrace, head_map: Tensor) -> GazeTrace {
        let ps = &self.params;
        let g = &self.gaze;
        let head_acts = g.head.forward(ps, head_map);
        let f_scene = concat_channels(&scene.se_reg, head_acts.last().unwrap());
        let pooled = max_pool2(&max_pool2(&max_pool2(&head_acts[0])));
        let g_red = leaky_relu(g.reduce.forward(ps, &scene.gaze_reg));
        let mut attn_in = pooled.data;
        attn_in.extend_from_slice(&g_red.data);
        let attn_hidden = leaky_relu_vec(g.attn1.forward(ps, &attn_in));
        let attn_logits = g.attn2.forward(ps, &attn_hidden);
        let attention = softmax(&attn_logits);
        let fused = concat_channels(&mul_spatial(&f_scene, &attention), &scene.gaze_reg);
        let enc = leaky_relu(g.encoder.forward(ps, &fused));
        let resampled = leaky_relu(g.resample.forward(ps, &enc));
        let mut decoder = Vec::with_capacity(g.deconvs.len());
        for d in &g.deconvs {
            let y = leaky_relu(d.forward(ps, decoder.last().unwrap_or(&resampled)));
            decoder.push(y);
        }
        let mut heatmap = g.out.forward(ps, decoder.last().unwrap());
        heatmap.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        GazeTrace {
            head_acts,
            attn_in,
            g_red,
            attn_hidden,
            attn_logits,
            attention,
            f_scene,
            fused,
            enc,
            resampled,
            decoder,
            heatmap,
        }
    }

    /// Backward through one person's regressor given `dL/dM` on the heatmap
    /// and `dL/dz` on the attention logits. Returns the gradients on
    /// `(se_reg, gaze_reg)`.
    pub fn backward_gaze(
        &self,
        scene: &SceneTrace,
        t: &GazeTrace,
        d_heatmap: &[f32],
        d_attn_logits: &[f32],
        grads: &mut Grads,
    ) -> (Tensor, Tensor) {
        let ps = &self.params;
        let g = &self.gaze;
        let mut dz = t.heatmap.clone();
        for (v, d) in dz.data.iter_mut().zip(d_heatmap) {
            *v = *d * *v * (1.0 - *v);
        }
        let last = t.decoder.last().unwrap();
        let mut dy = g.out.backward(ps, last, &dz, grads, true).unwrap();
        for (i, d) in g.deconvs.iter().enumerate().rev() {
            leaky_relu_backward(&t.decoder[i].data, &mut dy.data);
            let x = if i == 0 { &t.resampled } else { &t.decoder[i - 1] };
            dy = d.backward(ps, x, &dy, grads, true).unwrap();
        }
        leaky_relu_backward(&t.resampled.data, &mut dy.data);
        let mut denc = g.resample.backward(ps, &t.enc, &dy, grads, true).unwrap();
        leaky_relu_backward(&t.enc.data, &mut denc.data);
        let dfused = g.encoder.backward(ps, &t.fused, &denc, grads, true).unwrap();
        let (dfsa, mut d_gaze_reg) = split_channels(&dfused, t.f_scene.c);
        let (dfs, da) = mul_spatial_backward(&t.f_scene, &t.attention, &dfsa);
        let mut dlogits = softmax_backward(&t.attention, &da);
        dlogits.iter_mut().zip(d_attn_logits).for_each(|(a, b)| *a += b);
        let mut dh = g.attn2.backward(ps, &t.attn_hidden, &dlogits, grads, true).unwrap();
        leaky_relu_backward(&t.attn_hidden, &mut dh);
        let din = g.attn1.backward(ps, &t.attn_in, &dh, grads, true).unwrap();
        let pooled_len = t.attn_in.len() - t.g_red.len();
        let mut dg = Tensor { c: t.g_red.c, h: t.g_red.h, w: t.g_red.w, data: din[pooled_len..].to_vec() };
        leaky_relu_backward(&t.g_red.data, &mut dg.data);
        let dgr = g.reduce.backward(ps, &scene.gaze_reg, &dg, grads, true).unwrap();
        add_into(&mut d_gaze_reg, &dgr);
        let (d_se_reg, d_hm) = split_channels(&dfs, scene.se_reg.c);
        g.head.backward(ps, &t.head_acts, d_hm, grads, false);
        (d_se_reg, d_gaze_reg)
    }

    /// Backward through the scene-level network. Gradients on the regression
    /// features are the per-person sums from [`Network::backward_gaze`].
    pub fn backward_scene(
        &self,
        t: &SceneTrace,
        d_object_raw: &Tensor,
        d_head_raw: &Tensor,
        d_se_reg: &Tensor,
        d_gaze_reg: &Tensor,
        grads: &mut Grads,
    ) {
        let ps = &self.params;
        let f_se = t.f_se();
        let f_gaze = t.f_gaze();
        let mut df_se = self.object.backward(ps, &self.cfg, f_se, &t.object, d_object_raw, grads);
        add_into(&mut df_se, &self.head.backward(ps, &self.cfg, f_se, &t.head, d_head_raw, grads));
        let mut d = d_se_reg.clone();
        leaky_relu_backward(&t.se_reg.data, &mut d.data);
        add_into(&mut df_se, &self.se_reg.backward(ps, f_se, &d, grads, true).unwrap());
        let mut d = d_gaze_reg.clone();
        leaky_relu_backward(&t.gaze_reg.data, &mut d.data);
        let df_gaze = self.gaze_reg.backward(ps, f_gaze, &d, grads, true).unwrap();

        let dse = self.backbone.backward(ps, &t.se_backbone, df_se, grads, true).unwrap();
        self.se_in.backward(ps, &t.se_in, dse, grads, false);
        let dgz = self.gaze_backbone().backward(ps, &t.gaze_backbone, df_gaze, grads, true).unwrap();
        self.gaze_in.backward(ps, &t.gaze_in, dgz, grads, false);
    }

    /// Detects objects and heads, then regresses a heatmap for each of the
    /// most confident heads.
    pub fn infer(&self, image: &Tensor) -> Prediction {
        let scene = self.forward_scene(image);
        let frame = self.cfg.input_size as f64;
        let objects = decode_detections(
            &scene.object_raw(),
            &self.object_grid(),
            self.cfg.num_classes,
            frame,
            self.cfg.object_conf_threshold,
            self.cfg.nms_threshold,
        );
        let mut heads = decode_detections(
            &scene.head_raw(),
            &self.head_grid(),
            HEAD_CLASSES,
            frame,
            self.cfg.head_conf_threshold,
            self.cfg.nms_threshold,
        );
        heads.truncate(self.cfg.max_persons);
        let persons = heads
            .into_iter()
            .map(|head| {
                let gt = self.forward_gaze(&scene, &head.bbox);
                PersonPrediction { head, heatmap: gt.heatmap(), attention: gt.attention_f64() }
            })
            .collect();
        Prediction { objects, persons }
    }

    /// Runs only the regressor with a given head box (the ground-truth-box
    /// evaluation mode).
    pub fn infer_with_heads(&self, image: &Tensor, heads: &[BBox]) -> (Vec<Detection>, Vec<Heatmap>) {
        let scene = self.forward_scene(image);
        let objects = decode_detections(
            &scene.object_raw(),
            &self.object_grid(),
            self.cfg.num_classes,
            self.cfg.input_size as f64,
            self.cfg.object_conf_threshold,
            self.cfg.nms_threshold,
        );
        let maps = heads.iter().map(|h| self.forward_gaze(&scene, h).heatmap()).collect();
        (objects, maps)
    }
}
