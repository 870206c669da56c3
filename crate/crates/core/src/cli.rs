//! Command-line surface. Exit codes: 0 ok, 2 arguments, 3 I/O, 4 numeric,
//! 5 schema or version, 6 verification failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::Serialize;

use crate::boxgeom::{BBox, Detection};
use crate::data::{self, Dataset, GenParams, ANNOTATION_VERSION, FRAME, GENERATOR_VERSION};
use crate::error::Error;
use crate::evalpipe::{
    self, EvalMode, EvalOptions, EvalReport, SampleFile, SelectionRule, GT_SIGMA, REPORT_VERSION,
};
use crate::heatmap::{gaussian_gt, Heatmap};
use crate::losses::gradcheck::{self, Term};
use crate::losses::LossWeights;
use crate::network::checkpoint::{self, CHECKPOINT_VERSION};
use crate::network::NetworkConfig;
use crate::train::{self, Sample, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SCHEMA: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "gazebench", version, about = "Head-free gaze object detection on synthetic shelf scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model from scratch.
    #[command(long_about = TRAIN_ABOUT)]
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Threshold-sweep table for paired prediction and ground-truth samples.
    Metrics(MetricsArgs),
    /// Render PR curves, threshold sweeps and overlays from a report.
    Plot(PlotArgs),
}

const TRAIN_ABOUT: &str = "Train a model from scratch.

All parameters train end to end from the first epoch; there is no pretrained \
backbone, so no freeze-then-unfreeze schedule is applied. The learning rate is \
multiplied by --lr-decay after every epoch. The run directory receives \
config.json (the resolved configuration), losses.ndjson (one record per epoch) \
and model.ckpt.";

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, env = "GAZEBENCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Persons per scene.
    #[arg(long)]
    persons: Option<usize>,
    /// JSON file with generator parameters; --persons overrides it.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Attention loss weight; 0 disables the term in the total.
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,
    #[arg(long, default_value_t = 10000.0)]
    beta: f64,
    /// Energy loss weight; 0 disables the term in the total.
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.94)]
    lr_decay: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, env = "GAZEBENCH_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON file with network settings.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// full, gt-box, gt-heatmap or both.
    #[arg(long, default_value = "full")]
    mode: String,
    /// mean-energy or argmax-containment.
    #[arg(long, default_value = "mean-energy")]
    selection: String,
    /// Minimum confidence for a detection to be a gaze-object candidate.
    #[arg(long, default_value_t = 0.5)]
    candidate_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, env = "GAZEBENCH_SEED", default_value_t = 0)]
    seed: u64,
    /// Random problems drawn per term.
    #[arg(long, default_value_t = 3)]
    draws: usize,
    /// Test hook: perturb one analytic gradient of this term.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Prediction samples file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth samples file or an annotation file.
    #[arg(long)]
    gt: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset the report was computed on; enables scene overlays.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint the report was computed with; adds predicted heatmaps to the overlays.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Args(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Args(_) => EXIT_ARGS,
            Failure::Verify(_) => EXIT_VERIFY,
            Failure::Lib(e) => match e {
                Error::Invalid(_) | Error::InvalidBox { .. } | Error::Layout(_) => EXIT_ARGS,
                Error::Io { .. } | Error::Image { .. } => EXIT_IO,
                Error::NonFinite { .. } => EXIT_NUMERIC,
                Error::Schema(_) | Error::Record { .. } | Error::Version { .. } | Error::Json(_) => EXIT_SCHEMA,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Args(m) | Failure::Verify(m) => f.write_str(m),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let res = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
        Cmd::Metrics(a) => metrics_cmd(a),
        Cmd::Plot(a) => plot_cmd(a),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Lib(Error::Schema(format!("{}: {e}", path.display()))))
}

fn write_json(path: &Path, v: &impl Serialize) -> CmdResult {
    data::write_json(path, v).map_err(Failure::from)
}

fn mkdir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Lib(Error::io(dir, e)))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let mut p: GenParams = match &a.params {
        Some(f) => read_json(f)?,
        None => GenParams::default(),
    };
    if let Some(n) = a.persons {
        p.persons = n;
    }
    let m = data::write_dataset(&a.out, a.seed, a.scenes, &p)?;
    println!("wrote {} scenes to {} (seed {})", m.scenes, a.out.display(), m.seed);
    Ok(())
}

#[derive(Debug, Serialize)]
struct Versions {
    crate_version: &'static str,
    checkpoint: &'static str,
    annotations: &'static str,
    generator: &'static str,
}

const VERSIONS: Versions = Versions {
    crate_version: env!("CARGO_PKG_VERSION"),
    checkpoint: CHECKPOINT_VERSION,
    annotations: ANNOTATION_VERSION,
    generator: GENERATOR_VERSION,
};

#[derive(Debug, Serialize)]
struct RunConfig<'a> {
    command: &'static str,
    versions: Versions,
    data: &'a Path,
    train: &'a TrainConfig,
}

/// Loads every scene of a dataset as a training sample.
pub fn load_samples(ds: &Dataset, cfg: &NetworkConfig) -> crate::error::Result<Vec<Sample>> {
    (0..ds.len()).map(|i| Sample::new(ds.load_image(i)?, &ds.scenes[i], cfg)).collect()
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let network: NetworkConfig = match &a.network {
        Some(f) => read_json(f)?,
        None => NetworkConfig::default(),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        lr_decay: a.lr_decay,
        seed: a.seed,
        weights: LossWeights { alpha: a.alpha, beta: a.beta, gamma: a.gamma },
        network,
    };
    cfg.validate()?;
    let ds = Dataset::open(&a.data)?;
    let samples = load_samples(&ds, &cfg.network)?;
    mkdir(&a.out)?;
    write_json(&a.out.join("config.json"), &RunConfig { command: "train", versions: VERSIONS, data: &a.data, train: &cfg })?;
    let log_path = a.out.join("losses.ndjson");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let net = train::train(&cfg, &samples, |r| {
        train::write_log_line(&mut log, r).and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        log::info!("epoch {} total {:.6}", r.epoch, r.total);
        Ok(())
    });
    // A non-finite loss aborts here; the log keeps the epochs completed so far.
    let net = net?;
    checkpoint::save(&net, &a.out.join("model.ckpt"))?;
    println!("trained {} epochs on {} scenes; run written to {}", cfg.epochs, samples.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CmdResult {
    let mode: EvalMode = a.mode.parse().map_err(|e: Error| Failure::Args(e.to_string()))?;
    let rule = match a.selection.as_str() {
        "mean-energy" => SelectionRule::MeanEnergy,
        "argmax-containment" => SelectionRule::ArgmaxContainment,
        s => return Err(Failure::Args(format!("unknown selection rule {s:?} (mean-energy, argmax-containment)"))),
    };
    if !a.ckpt.is_file() {
        return Err(Failure::Args(format!("checkpoint {} does not exist", a.ckpt.display())));
    }
    let opts = EvalOptions { rule, candidate_threshold: a.candidate_threshold, ..Default::default() };
    let net = checkpoint::load(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    let report = evalpipe::evaluate(&net, &ds, mode, &opts)?;
    write_json(&a.out, &report)?;
    let g = &report.aggregates;
    println!(
        "mode {mode}: AP {:.4} AP50 {:.4} AP75 {:.4} | mSoC {:.4} mSoC50 {:.4} mSoC75 {:.4} | wUoC {:.4} | L2 {} | gaze mAP {:.4}",
        g.ap,
        g.ap50,
        g.ap75,
        g.msoc,
        g.msoc50,
        g.msoc75,
        g.wuoc,
        fmt_opt(g.l2, 4),
        g.gaze_map
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn gradcheck_cmd(a: GradcheckArgs) -> CmdResult {
    let corrupt = match &a.corrupt {
        Some(s) => Some(Term::parse(s).ok_or_else(|| Failure::Args(format!("unknown loss term {s:?}")))?),
        None => None,
    };
    if a.draws == 0 {
        return Err(Failure::Args("--draws must be at least 1".into()));
    }
    let reports = gradcheck::run(a.seed, a.draws, corrupt);
    for r in &reports {
        println!(
            "{:<7} max_rel_err {:.3e}  tol {:.0e}  checked {:>5}  {}",
            r.term.name(),
            r.max_rel_err,
            r.tolerance,
            r.checked,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failing: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.term.name()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("gradient check failed for {}", failing.join(", "))))
    }
}

/// Reads a samples file, or converts an annotation file into GT samples.
fn read_samples(path: &Path, allow_annotations: bool) -> Result<SampleFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let version = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("version").and_then(|x| x.as_str()).map(str::to_string));
    if allow_annotations && version.as_deref() == Some(ANNOTATION_VERSION) {
        return Ok(SampleFile::from_annotations(&data::parse_annotations(&text)?));
    }
    Ok(SampleFile::parse(&text)?)
}

fn metrics_cmd(a: MetricsArgs) -> CmdResult {
    let pred = read_samples(&a.pred, false)?;
    let gt = read_samples(&a.gt, true)?;
    let m = evalpipe::sample_metrics(&pred, &gt)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
    } else {
        print!("{}", sweep_table(&m));
    }
    Ok(())
}

/// Percent table: one column per threshold, then the sweep mean.
pub fn sweep_table(m: &evalpipe::SampleMetrics) -> String {
    let mut s = String::from("metric  ");
    for t in &m.msoc.thresholds {
        s.push_str(&format!(" {t:>6.2}"));
    }
    s.push_str("   mean\n");
    for (name, sw) in [("mSoC", &m.msoc), ("wUoC", &m.wuoc)] {
        s.push_str(&format!("{name:<8}"));
        for v in &sw.values {
            s.push_str(&format!(" {:>6.1}", 100.0 * v));
        }
        s.push_str(&format!(" {:>6.1}\n", 100.0 * sw.headline));
    }
    s.push_str(&format!(
        "samples {}  AUC {}  L2 {}  angle {}\n",
        m.samples,
        fmt_opt(m.auc, 4),
        fmt_opt(m.l2, 4),
        fmt_opt(m.angle, 2)
    ));
    s
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 240;
const MARGIN: f32 = 24.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([215, 215, 215]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const SERIES: [Rgb<u8>; 3] = [Rgb([200, 30, 30]), Rgb([30, 90, 200]), Rgb([30, 150, 60])];

/// Unit-square line chart with a quarter grid; no text.
fn line_chart(series: &[Vec<(f64, f64)>], x_range: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, WHITE);
    let (w, h) = (PLOT_W as f32 - 2.0 * MARGIN, PLOT_H as f32 - 2.0 * MARGIN);
    let px = |x: f64, y: f64| {
        let u = ((x - x_range.0) / (x_range.1 - x_range.0)) as f32;
        (MARGIN + u * w, MARGIN + (1.0 - y as f32) * h)
    };
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let x = x_range.0 + f * (x_range.1 - x_range.0);
        draw_line_segment_mut(&mut img, px(x, 0.0), px(x, 1.0), GRAY);
        draw_line_segment_mut(&mut img, px(x_range.0, f), px(x_range.1, f), GRAY);
    }
    draw_line_segment_mut(&mut img, px(x_range.0, 0.0), px(x_range.1, 0.0), BLACK);
    draw_line_segment_mut(&mut img, px(x_range.0, 0.0), px(x_range.0, 1.0), BLACK);
    for (s, color) in series.iter().zip(SERIES.iter().cycle()) {
        for w in s.windows(2) {
            draw_line_segment_mut(&mut img, px(w[0].0, w[0].1), px(w[1].0, w[1].1), *color);
        }
        for &(x, y) in s {
            let (a, b) = px(x, y);
            draw_filled_circle_mut(&mut img, (a as i32, b as i32), 2, *color);
        }
    }
    img
}

fn save_png(img: &RgbImage, path: &Path) -> CmdResult {
    img.save(path).map_err(|e| Failure::Lib(Error::Image { path: path.to_path_buf(), source: e }))
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (x, y) = (b.x1().round() as i32, b.y1().round() as i32);
    let (w, h) = ((b.width().round() as u32).max(1), (b.height().round() as u32).max(1));
    draw_hollow_rect_mut(img, Rect::at(x, y).of_size(w, h), color);
    if w > 2 && h > 2 {
        draw_hollow_rect_mut(img, Rect::at(x + 1, y + 1).of_size(w - 2, h - 2), color);
    }
}

/// Blends a heatmap over the image in red.
fn blend_heatmap(img: &mut RgbImage, m: &Heatmap) {
    let (w, h) = img.dimensions();
    for y in 0..h {
        for x in 0..w {
            let c = (x as usize * m.width / w as usize).min(m.width - 1);
            let r = (y as usize * m.height / h as usize).min(m.height - 1);
            let v = m.get(r, c).clamp(0.0, 1.0) as f32 * 0.6;
            let p = img.get_pixel_mut(x, y);
            let base = [p[0] as f32, p[1] as f32, p[2] as f32];
            *p = Rgb([
                (base[0] * (1.0 - v) + 255.0 * v) as u8,
                (base[1] * (1.0 - v)) as u8,
                (base[2] * (1.0 - v)) as u8,
            ]);
        }
    }
}

fn plot_cmd(a: PlotArgs) -> CmdResult {
    let text = fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let report = EvalReport::parse(&text)?;
    mkdir(&a.out)?;
    let mut written = Vec::new();

    let preds: Vec<Vec<Detection>> = report.scenes.iter().map(|r| r.detections.clone()).collect();
    let gts: Vec<Vec<(BBox, usize)>> =
        report.scenes.iter().map(|r| r.objects.iter().map(|o| (o.bbox, o.class_id)).collect()).collect();
    let curves: Vec<Vec<(f64, f64)>> = [0.5, 0.75]
        .iter()
        .map(|&t| {
            let (ranked, n) = evalpipe::pooled_ranking(&preds, &gts, t);
            evalpipe::pr_curve(&ranked, n)
        })
        .collect();
    let p = a.out.join("pr_detection.png");
    save_png(&line_chart(&curves, (0.0, 1.0)), &p)?;
    written.push(p);

    let g = &report.aggregates;
    let ts = evalpipe::thresholds();
    let sweep = |v: &[f64]| ts.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    let p = a.out.join("sweep.png");
    save_png(&line_chart(&[sweep(&g.msoc_sweep), sweep(&g.wuoc_sweep)], (0.5, 0.95)), &p)?;
    written.push(p);

    if let Some(dir) = &a.data {
        let ds = Dataset::open(dir)?;
        let net = match &a.ckpt {
            Some(c) => Some(checkpoint::load(c)?),
            None => None,
        };
        for rec in &report.scenes {
            let idx = ds
                .scenes
                .iter()
                .position(|s| s.image == rec.image)
                .ok_or_else(|| Failure::Lib(Error::Schema(format!("report scene {} not in dataset", rec.image))))?;
            let path = ds.root.join(&ds.scenes[idx].image);
            let base = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
            let pred = match &net {
                Some(n) => Some(n.infer(&ds.load_image(idx)?)),
                None => None,
            };
            for (k, person) in rec.persons.iter().enumerate() {
                let mut img = base.clone();
                let map = match report.mode {
                    EvalMode::GtHeatmap | EvalMode::Both => Some(gaussian_gt(person.gt_point, 64, 64, GT_SIGMA, GT_SIGMA)?),
                    _ => pred.as_ref().and_then(|p| {
                        person.pred_head.and_then(|h| p.persons.iter().find(|q| q.head == h).map(|q| q.heatmap.clone()))
                    }),
                };
                if let Some(m) = &map {
                    blend_heatmap(&mut img, m);
                }
                draw_box(&mut img, &person.gt_box, SERIES[2]);
                draw_box(&mut img, &person.gt_head, SERIES[2]);
                if let Some(s) = &person.selected {
                    draw_box(&mut img, &s.bbox, SERIES[1]);
                }
                let f = FRAME as f32;
                let dot = |q: crate::heatmap::GazePoint| ((q.x as f32 * f) as i32, (q.y as f32 * f) as i32);
                draw_filled_circle_mut(&mut img, dot(person.gt_point), 3, SERIES[2]);
                if let Some(q) = person.pred_point {
                    draw_filled_circle_mut(&mut img, dot(q), 3, SERIES[0]);
                }
                let p = a.out.join(format!("overlay_{:06}_{k}.png", rec.scene));
                save_png(&img, &p)?;
                written.push(p);
            }
        }
    }
    println!("wrote {} images to {} ({} report, mode {})", written.len(), a.out.display(), REPORT_VERSION, report.mode);
    Ok(())
}
