//! Synthetic shelf scenes (colored products, a head disc and a gaze ray),
//! annotation I/O and dataset loading.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boxgeom::{iou, BBox};
use crate::error::{Error, Result};
use crate::heatmap::GazePoint;
use crate::nn::Tensor;

pub const ANNOTATION_VERSION: &str = "goomini-1";
pub const GENERATOR_VERSION: &str = "gazebench-gen-1";
pub const FRAME: u32 = 224;
pub const MAX_CLASSES: usize = 24;

const SHELF_TOP: u32 = 8;
const SHELF_BOTTOM: u32 = 136;
const FLOOR_TOP: u32 = 144;
const FLOOR_BOTTOM: u32 = 216;
const CELL: u32 = 16;
const BORDER: u32 = 2;

/// Class colors; chosen to be distinct from each other and the background.
const PALETTE: [[u8; 3]; MAX_CLASSES] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [0, 0, 0],
    [100, 200, 150],
    [200, 100, 150],
];
const SHELF_BG: [u8; 3] = [188, 178, 164];
const BOARD: [u8; 3] = [120, 90, 60];
const FLOOR_BG: [u8; 3] = [96, 104, 112];
const SKIN: [u8; 3] = [232, 196, 160];
const HAIR: [u8; 3] = [60, 40, 30];
const RAY: [u8; 3] = [20, 60, 255];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub shelf_rows: u32,
    pub shelf_cols: u32,
    /// Objects per scene; `None` fills every slot.
    pub objects: Option<usize>,
    pub object_size: [u32; 2],
    pub num_classes: usize,
    pub persons: usize,
    pub head_size: [u32; 2],
    /// Pixel jitter of head centers around detection-cell centers.
    pub head_jitter: u32,
    /// Gaze point jitter as a fraction of the gazed box extent.
    pub gaze_jitter: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            shelf_rows: 2,
            shelf_cols: 4,
            objects: None,
            object_size: [32, 48],
            num_classes: MAX_CLASSES,
            persons: 1,
            head_size: [20, 32],
            head_jitter: 3,
            gaze_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaze {
    pub head: usize,
    pub point: GazePoint,
    pub object: usize,
}

/// Annotation of one scene; `image` is relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnn {
    pub image: String,
    pub objects: Vec<Object>,
    pub heads: Vec<BBox>,
    pub gaze: Vec<Gaze>,
}

impl SceneAnn {
    pub fn gaze_box(&self, g: &Gaze) -> BBox {
        self.objects[g.object].bbox
    }

    pub fn object_targets(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.class_id)).collect()
    }

    /// Checks the cross-references and point containment.
    pub fn validate(&self, index: usize) -> Result<()> {
        let rec = |message: String| Error::Record { index, message };
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= MAX_CLASSES {
                return Err(rec(format!("object {i} class {} exceeds {}", o.class_id, MAX_CLASSES - 1)));
            }
        }
        for (i, g) in self.gaze.iter().enumerate() {
            if g.head >= self.heads.len() {
                return Err(rec(format!("gaze {i} references head {} of {}", g.head, self.heads.len())));
            }
            if g.object >= self.objects.len() {
                return Err(rec(format!("gaze {i} references object {} of {}", g.object, self.objects.len())));
            }
            let b = self.objects[g.object].bbox;
            let f = FRAME as f64;
            if !g.point.in_unit_square() || !b.contains(g.point.x * f, g.point.y * f) {
                return Err(rec(format!("gaze {i} point {:?} lies outside object {}", [g.point.x, g.point.y], g.object)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub ann: SceneAnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub version: String,
    pub scenes: Vec<SceneAnn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub seed: u64,
    pub scenes: usize,
    pub split: String,
    pub params: GenParams,
    pub files: Vec<String>,
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: [u8; 3]) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as u32, (cx + r).ceil().min(FRAME as f64) as u32);
    let (y0, y1) = ((cy - r).floor().max(0.0) as u32, (cy + r).ceil().min(FRAME as f64) as u32);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
}

/// Bresenham line from `a` toward `b`, stopping at the first pixel inside `stop`.
fn ray(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), stop: &BBox, skip: &BBox) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if stop.contains(px, py) {
            break;
        }
        if !skip.contains(px, py) && (0..FRAME as i64).contains(&x) && (0..FRAME as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(RAY));
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Per-scene generator seeded from the dataset seed and the scene index.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_params(p: &GenParams) -> Result<()> {
    let slots = (p.shelf_rows * p.shelf_cols) as usize;
    let n_obj = p.objects.unwrap_or(slots);
    if p.num_classes == 0 || p.num_classes > MAX_CLASSES {
        return Err(Error::Layout(format!("palette size {} outside 1..={MAX_CLASSES}", p.num_classes)));
    }
    if n_obj > slots {
        return Err(Error::Layout(format!("{n_obj} objects for {slots} shelf slots")));
    }
    if n_obj > p.num_classes {
        return Err(Error::Layout(format!("{n_obj} objects need distinct classes but palette has {}", p.num_classes)));
    }
    if p.persons > 0 && n_obj == 0 {
        return Err(Error::Layout("persons need at least one object to look at".into()));
    }
    if p.object_size[0] > p.object_size[1] || p.head_size[0] > p.head_size[1] || p.head_size[0] < 4 {
        return Err(Error::Layout("size ranges must be ordered and heads at least 4 px".into()));
    }
    if !(0.0..0.5).contains(&p.gaze_jitter) {
        return Err(Error::Layout(format!("gaze jitter {} must lie in [0, 0.5)", p.gaze_jitter)));
    }
    // Each head blocks its column and both neighbors, so this many always fit.
    let fit = ((FRAME / CELL) as usize - 2) / 3;
    if p.persons > fit {
        return Err(Error::Layout(format!("at most {fit} persons fit on the floor")));
    }
    Ok(())
}

/// Renders one scene. Heads sit on detection-cell centers (±jitter) in the
/// floor strip so that some head anchor always overlaps them by IoU > 0.5.
pub fn generate_scene(seed: u64, index: usize, p: &GenParams) -> Result<Scene> {
    check_params(p)?;
    let mut rng = scene_rng(seed, index);
    let mut img = RgbImage::from_pixel(FRAME, FRAME, Rgb(FLOOR_BG));
    fill(&mut img, 0, 0, FRAME, SHELF_BOTTOM + 4, SHELF_BG);
    let slot_w = FRAME / p.shelf_cols.max(1);
    let slot_h = (SHELF_BOTTOM - SHELF_TOP) / p.shelf_rows.max(1);
    for r in 1..=p.shelf_rows {
        let y = SHELF_TOP + r * slot_h;
        fill(&mut img, 0, y, FRAME, y + 3, BOARD);
    }
    let max_side = p.object_size[1].min(slot_w.saturating_sub(4)).min(slot_h.saturating_sub(6));
    let min_side = p.object_size[0].min(max_side);
    if max_side < 8 {
        return Err(Error::Layout(format!("shelf slots {slot_w}x{slot_h} too small for objects")));
    }

    let slots = (p.shelf_rows * p.shelf_cols) as usize;
    let n_obj = p.objects.unwrap_or(slots);
    let mut chosen: Vec<usize> = sample(&mut rng, slots, n_obj).into_vec();
    chosen.sort_unstable();
    let classes = sample(&mut rng, p.num_classes, n_obj).into_vec();
    let mut objects = Vec::with_capacity(n_obj);
    for (slot, class_id) in chosen.into_iter().zip(classes) {
        let (sr, sc) = (slot as u32 / p.shelf_cols, slot as u32 % p.shelf_cols);
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let x0 = sc * slot_w + rng.random_range(2..=slot_w - w - 2);
        // Products stand on the board below their slot.
        let y1 = SHELF_TOP + (sr + 1) * slot_h;
        let y0 = y1 - h;
        fill(&mut img, x0, y0, x0 + w, y1, [0, 0, 0]);
        fill(&mut img, x0 + BORDER, y0 + BORDER, x0 + w - BORDER, y1 - BORDER, PALETTE[class_id]);
        let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, y1 as f64)?;
        objects.push(Object { bbox, class_id });
    }

    // Heads: distinct, non-adjacent floor cells.
    let head_cols: Vec<u32> = (1..FRAME / CELL - 1).collect();
    let head_rows: Vec<u32> = (FLOOR_TOP / CELL + 1..FLOOR_BOTTOM / CELL - 1).collect();
    let mut used = BTreeSet::new();
    let mut heads = Vec::with_capacity(p.persons);
    let mut gaze = Vec::with_capacity(p.persons);
    for person in 0..p.persons {
        let col = loop {
            let c = head_cols[rng.random_range(0..head_cols.len())];
            if !used.contains(&c) && !used.contains(&(c + 1)) && !used.contains(&(c.wrapping_sub(1))) {
                used.insert(c);
                break c;
            }
        };
        let row = head_rows[rng.random_range(0..head_rows.len())];
        let j = p.head_jitter as i32;
        let cx = (col * CELL + CELL / 2) as f64 + rng.random_range(-j..=j) as f64;
        let cy = (row * CELL + CELL / 2) as f64 + rng.random_range(-j..=j) as f64;
        let d = rng.random_range(p.head_size[0]..=p.head_size[1]) as f64;
        let head = BBox::from_center(cx, cy, d, d)?;

        let target = rng.random_range(0..n_obj);
        let b = objects[target].bbox;
        let (ox, oy) = b.center();
        let qx = ox + p.gaze_jitter * b.width() * rng.random_range(-1.0..=1.0);
        let qy = oy + p.gaze_jitter * b.height() * rng.random_range(-1.0..=1.0);
        let f = FRAME as f64;
        ray(&mut img, (cx as i64, cy as i64), (qx as i64, qy as i64), &b, &head);
        disc(&mut img, cx, cy, d / 2.0, SKIN);
        // Hair on the far side from the target hints at the facing direction.
        let (vx, vy) = (qx - cx, qy - cy);
        let n = (vx * vx + vy * vy).sqrt().max(1e-9);
        disc(&mut img, cx - vx / n * d * 0.25, cy - vy / n * d * 0.25, d * 0.3, HAIR);
        heads.push(head);
        gaze.push(Gaze { head: person, point: GazePoint::new(qx / f, qy / f), object: target });
    }
    let ann = SceneAnn { image: image_name(index), objects, heads, gaze };
    ann.validate(index)?;
    Ok(Scene { image: img, ann })
}

pub fn image_name(index: usize) -> String {
    format!("images/{index:06}.png")
}

/// Writes `n` scenes, `annotations.json` and `manifest.json` under `out`.
pub fn write_dataset(out: &Path, seed: u64, n: usize, params: &GenParams) -> Result<DatasetManifest> {
    check_params(params)?;
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let s = generate_scene(seed, i, params)?;
        let path = out.join(&s.ann.image);
        s.image.save_with_format(&path, image::ImageFormat::Png).map_err(|e| Error::Image { path: path.clone(), source: e })?;
        scenes.push(s.ann);
    }
    let files: Vec<String> = scenes.iter().map(|s| s.image.clone()).collect();
    write_annotations(&out.join("annotations.json"), &scenes)?;
    let manifest = DatasetManifest {
        generator: GENERATOR_VERSION.to_string(),
        seed,
        scenes: n,
        split: "train".to_string(),
        params: params.clone(),
        files,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_annotations(path: &Path, scenes: &[SceneAnn]) -> Result<()> {
    write_json(path, &AnnotationFile { version: ANNOTATION_VERSION.to_string(), scenes: scenes.to_vec() })
}

fn warn_unknown(v: &Value, known: &[&str], ctx: &str) {
    if let Value::Object(m) = v {
        for k in m.keys().filter(|k| !known.contains(&k.as_str())) {
            log::warn!("ignoring unknown field {k:?} in {ctx}");
        }
    }
}

/// Parses an annotation document, warning on unknown fields and rejecting
/// broken cross-references with the offending scene index.
pub fn parse_annotations(text: &str) -> Result<Vec<SceneAnn>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Schema(format!("annotations: {e}")))?;
    let version = v.get("version").and_then(Value::as_str).unwrap_or("<missing>");
    if version != ANNOTATION_VERSION {
        return Err(Error::Version { expected: ANNOTATION_VERSION.to_string(), found: version.to_string() });
    }
    warn_unknown(&v, &["version", "scenes"], "annotation file");
    let raw = v.get("scenes").and_then(Value::as_array).ok_or_else(|| Error::Schema("missing scenes array".into()))?;
    let mut scenes = Vec::with_capacity(raw.len());
    for (index, s) in raw.iter().enumerate() {
        let ctx = format!("scene {index}");
        warn_unknown(s, &["image", "objects", "heads", "gaze"], &ctx);
        for o in s.get("objects").and_then(Value::as_array).into_iter().flatten() {
            warn_unknown(o, &["box", "class"], &ctx);
        }
        for g in s.get("gaze").and_then(Value::as_array).into_iter().flatten() {
            warn_unknown(g, &["head", "point", "object"], &ctx);
        }
        let ann: SceneAnn =
            serde_json::from_value(s.clone()).map_err(|e| Error::Record { index, message: e.to_string() })?;
        ann.validate(index)?;
        scenes.push(ann);
    }
    Ok(scenes)
}

pub fn read_annotations(path: &Path) -> Result<Vec<SceneAnn>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// Normalizes an image to `pixel / 255 - 0.5` in CHW layout.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0 - 0.5;
        }
    }
    t
}

/// An annotated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub scenes: Vec<SceneAnn>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let scenes = read_annotations(&root.join("annotations.json"))?;
        Ok(Dataset { root: root.to_path_buf(), scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor> {
        let path = self.root.join(&self.scenes[i].image);
        let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        if img.dimensions() != (FRAME, FRAME) {
            return Err(Error::Record { index: i, message: format!("image is {:?}, expected {FRAME}x{FRAME}", img.dimensions()) });
        }
        Ok(image_to_tensor(&img))
    }
}

/// Best head-anchor IoU for a head box, used to check generator geometry.
pub fn best_anchor_iou(head: &BBox, anchors: &[BBox]) -> f64 {
    anchors.iter().map(|a| iou(head, a)).fold(0.0, f64::max)
}
