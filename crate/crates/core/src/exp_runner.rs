//! Experiment configs and presets, the metrics log, plots, rendered maps,
//! the results table, and `run_experiment` tying them together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::RgbImage;
use plotters::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vocseg_nn::{Mode, Tensor};

use crate::error::{Result, SegError};
use crate::model_zoo::{build_model, load_checkpoint, save_checkpoint, ArchId, Model};
use crate::objective_metrics::{argmax_classes, class_weights, MetricSummary};
use crate::paired_transforms::AugmentPolicy;
use crate::palette::{voc_color, write_palette_png};
use crate::raster::{resize_bilinear, ClassMask};
use crate::train_engine::{evaluate, fit, EpochRecord, Scheduler, SegTrainer, TrainConfig};
use crate::voc_data::{class_pixel_counts, load_rgb, make_batches, Batch, DatasetRoot, SegSample, Split, INPUT_SIZE, NUM_CLASSES};

/// Environment variable consulted when a config names no data root.
pub const DATA_ROOT_ENV: &str = "VOCSEG_DATA_ROOT";

/// Where the transfer model's encoder weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSource {
    File(PathBuf),
    /// Randomly initialized and then frozen; only useful for smoke runs.
    Random,
}

/// Optional caps on how many identifiers of each split are used (file order).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitLimits {
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Run directory name under `output_dir`.
    pub name: String,
    /// Row label in the results table.
    pub label: String,
    pub arch: ArchId,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub backbone_weights: Option<BackboneSource>,
    pub limits: SplitLimits,
    /// Number of test samples rendered to `maps/`.
    pub render_maps: usize,
}

pub const PRESETS: [&str; 7] = ["baseline", "annealing", "augmentation", "weights", "advanced_fcn", "transfer", "unet"];

const KEYS: [&str; 22] = [
    "name",
    "label",
    "arch",
    "lr",
    "lr_min",
    "epochs",
    "patience",
    "scheduler",
    "t_max",
    "augment",
    "flip_prob",
    "rotation_deg",
    "crop_size",
    "weighted_loss",
    "batch_size",
    "seed",
    "data_root",
    "output_dir",
    "backbone_weights",
    "train_limit",
    "val_limit",
    "test_limit",
];
const RENDER_MAPS_KEY: &str = "render_maps";

impl ExperimentConfig {
    fn base(name: &str, label: &str, arch: ArchId) -> Self {
        Self {
            name: name.to_string(),
            label: label.to_string(),
            arch,
            train: TrainConfig::default(),
            augment: AugmentPolicy::disabled(),
            data_root: None,
            output_dir: PathBuf::from("runs"),
            backbone_weights: None,
            limits: SplitLimits::default(),
            render_maps: 4,
        }
    }

    /// The seven experiments, each building on the previous improvements.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = match name {
            "baseline" => return Ok(Self::base("baseline", "FCN Baseline", ArchId::FcnBaseline)),
            "annealing" => Self::base("annealing", "Annealing", ArchId::FcnBaseline),
            "augmentation" => Self::base("augmentation", "Augmentation", ArchId::FcnBaseline),
            "weights" => Self::base("weights", "Weights", ArchId::FcnBaseline),
            "advanced_fcn" => Self::base("advanced_fcn", "Adv FCN", ArchId::AdvancedFcn),
            "transfer" => Self::base("transfer", "Transfer", ArchId::TransferResnet34),
            "unet" => Self::base("unet", "UNet", ArchId::Unet),
            other => return Err(SegError::config("preset", format!("unknown preset `{other}`"))),
        };
        c.train.scheduler = Scheduler::Cosine;
        c.train.t_max = match name {
            "advanced_fcn" => 30,
            "transfer" | "unet" => 40,
            _ => c.train.epochs_max,
        };
        if name != "annealing" {
            c.augment = AugmentPolicy::default();
        }
        c.train.use_weights = !matches!(name, "annealing" | "augmentation");
        if name == "transfer" {
            c.backbone_weights = Some(BackboneSource::File(PathBuf::from("weights/resnet34.safetensors")));
        }
        Ok(c)
    }

    /// Parses `key = value` lines; `#` starts a comment. `name` and `arch`
    /// are required, everything else defaults to the baseline setup.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SegError::config(line, format!("line {} is not of the form `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) && key != RENDER_MAPS_KEY {
                return Err(SegError::config(key, "unknown key"));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(SegError::config(key, "given more than once"));
            }
        }
        let required = |key: &str| entries.get(key).cloned().ok_or_else(|| SegError::config(key, "missing"));
        let name = required("name")?;
        let arch: ArchId = required("arch")?.parse()?;
        let mut c = Self::base(&name, &name, arch);
        for (key, value) in &entries {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(SegError::io(path))?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| SegError::config(key, format!("`{value}` is not a valid number")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "yes" | "on" => Ok(true),
                "false" | "no" | "off" => Ok(false),
                _ => Err(SegError::config(key, format!("`{value}` is not a boolean"))),
            }
        }
        fn limit(key: &str, value: &str) -> Result<Option<usize>> {
            if value == "all" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        match key {
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(SegError::config(key, "must be a non-empty plain directory name"));
                }
                self.name = value.to_string();
            }
            "label" => self.label = value.to_string(),
            "arch" => self.arch = value.parse()?,
            "lr" => self.train.lr_max = num(key, value)?,
            "lr_min" => self.train.lr_min = num(key, value)?,
            "epochs" => self.train.epochs_max = num(key, value)?,
            "patience" => self.train.patience = num(key, value)?,
            "scheduler" => {
                self.train.scheduler = match value {
                    "none" => Scheduler::None,
                    "cosine" => Scheduler::Cosine,
                    _ => return Err(SegError::config(key, format!("`{value}` is not one of none, cosine"))),
                }
            }
            "t_max" => self.train.t_max = num(key, value)?,
            "augment" => self.augment.enabled = flag(key, value)?,
            "flip_prob" => self.augment.flip_prob = num(key, value)?,
            "rotation_deg" => self.augment.max_rotation_deg = num(key, value)?,
            "crop_size" => self.augment.crop_size = num(key, value)?,
            "weighted_loss" => self.train.use_weights = flag(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "backbone_weights" => {
                self.backbone_weights = Some(match value {
                    "random" => BackboneSource::Random,
                    path => BackboneSource::File(PathBuf::from(path)),
                })
            }
            "train_limit" => self.limits.train = limit(key, value)?,
            "val_limit" => self.limits.val = limit(key, value)?,
            "test_limit" => self.limits.test = limit(key, value)?,
            RENDER_MAPS_KEY => self.render_maps = num(key, value)?,
            _ => return Err(SegError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment.output_size != INPUT_SIZE {
            return Err(SegError::config("crop_size", format!("augmentation must return {INPUT_SIZE}x{INPUT_SIZE}")));
        }
        match (self.arch, &self.backbone_weights) {
            (ArchId::TransferResnet34, None) => Err(SegError::config(
                "backbone_weights",
                "the transfer architecture needs a ResNet34 weight file (or `random`)",
            )),
            (ArchId::TransferResnet34, _) | (_, None) => Ok(()),
            (arch, Some(_)) => Err(SegError::config("backbone_weights", format!("{arch} has no backbone"))),
        }
    }

    /// Command-line overrides.
    pub fn apply_overrides(&mut self, seed: Option<u64>, data_root: Option<PathBuf>, out: Option<PathBuf>) {
        if let Some(seed) = seed {
            self.train.seed = seed;
        }
        if let Some(root) = data_root {
            self.data_root = Some(root);
        }
        if let Some(out) = out {
            self.output_dir = out;
        }
    }

    /// Serializes every key, in a form [`ExperimentConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &self.augment;
        let limit = |l: Option<usize>| l.map_or_else(|| "all".to_string(), |n| n.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("name", self.name.clone());
        kv("label", self.label.clone());
        kv("arch", self.arch.to_string());
        kv("lr", t.lr_max.to_string());
        kv("lr_min", t.lr_min.to_string());
        kv("epochs", t.epochs_max.to_string());
        kv("patience", t.patience.to_string());
        kv("scheduler", if t.scheduler == Scheduler::Cosine { "cosine" } else { "none" }.into());
        kv("t_max", t.t_max.to_string());
        kv("augment", a.enabled.to_string());
        kv("flip_prob", a.flip_prob.to_string());
        kv("rotation_deg", a.max_rotation_deg.to_string());
        kv("crop_size", a.crop_size.to_string());
        kv("weighted_loss", t.use_weights.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        if let Some(root) = &self.data_root {
            kv("data_root", root.display().to_string());
        }
        kv("output_dir", self.output_dir.display().to_string());
        match &self.backbone_weights {
            Some(BackboneSource::File(p)) => kv("backbone_weights", p.display().to_string()),
            Some(BackboneSource::Random) => kv("backbone_weights", "random".into()),
            None => {}
        }
        kv("train_limit", limit(self.limits.train));
        kv("val_limit", limit(self.limits.val));
        kv("test_limit", limit(self.limits.test));
        kv(RENDER_MAPS_KEY, self.render_maps.to_string());
        s
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    fn resolve_data_root(&self) -> Result<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| SegError::config("data_root", format!("not set in the config, on the command line, or in ${DATA_ROOT_ENV}")))
    }
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "train_miou",
    "val_loss",
    "val_acc",
    "val_miou",
];

fn record_fields(r: &EpochRecord) -> [String; 8] {
    // `Display` for floats is the shortest string that parses back exactly.
    [
        r.epoch.to_string(),
        r.lr.to_string(),
        r.train.loss.to_string(),
        r.train.pixel_accuracy.to_string(),
        r.train.mean_iou.to_string(),
        r.val.loss.to_string(),
        r.val.pixel_accuracy.to_string(),
        r.val.mean_iou.to_string(),
    ]
}

/// Appends one CSV row per epoch, flushing each so a crashed run keeps its history.
pub struct MetricsLogWriter {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl MetricsLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(SegError::io(path))?;
        let mut w = Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        w.write_row(&METRICS_HEADER)?;
        Ok(w)
    }

    fn write_row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        let to_err = |e: String| SegError::MetricsLog {
            path: self.path.clone(),
            line: 0,
            msg: e,
        };
        self.writer.write_record(fields).map_err(|e| to_err(e.to_string()))?;
        self.writer.flush().map_err(|e| to_err(e.to_string()))
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.write_row(&record_fields(record))
    }
}

pub fn write_metrics_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = MetricsLogWriter::create(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let err = |line: u64, msg: String| SegError::MetricsLog {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = fs::File::open(path).map_err(SegError::io(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(err(1, format!("header must be `{}`", METRICS_HEADER.join(","))));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let f = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| err(line, format!("{} = `{}` is not a number", METRICS_HEADER[i], &row[i])))
        };
        let epoch = row[0]
            .parse::<usize>()
            .map_err(|_| err(line, format!("epoch = `{}` is not an integer", &row[0])))?;
        records.push(EpochRecord {
            epoch,
            lr: f(1)?,
            train: MetricSummary {
                loss: f(2)?,
                pixel_accuracy: f(3)?,
                mean_iou: f(4)?,
            },
            val: MetricSummary {
                loss: f(5)?,
                pixel_accuracy: f(6)?,
                mean_iou: f(7)?,
            },
        });
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Loss,
    MeanIou,
    Accuracy,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::Loss, PlotKind::MeanIou, PlotKind::Accuracy];

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::Loss => "loss.png",
            PlotKind::MeanIou => "iou.png",
            PlotKind::Accuracy => "accuracy.png",
        }
    }

    fn title(self) -> &'static str {
        match self {
            PlotKind::Loss => "Cross-entropy loss",
            PlotKind::MeanIou => "Mean IoU",
            PlotKind::Accuracy => "Pixel accuracy",
        }
    }

    fn value(self, m: &MetricSummary) -> f64 {
        match self {
            PlotKind::Loss => m.loss,
            PlotKind::MeanIou => m.mean_iou,
            PlotKind::Accuracy => m.pixel_accuracy,
        }
    }
}

/// Environment variable naming a TTF/OTF file for plot text.
pub const FONT_ENV: &str = "VOCSEG_FONT";
const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Registers a sans-serif font once; without one, plots carry no text.
fn plot_font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var_os(FONT_ENV).map(PathBuf::from);
        let bytes = env
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .find_map(|p| fs::read(p).ok());
        match bytes {
            Some(bytes) => {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
            }
            None => false,
        }
    })
}

pub const PLOT_SIZE: (u32, u32) = (800, 500);

/// Renders train and validation curves of one metric into an RGB buffer.
pub fn render_plot(records: &[EpochRecord], kind: PlotKind) -> Result<RgbImage> {
    let path = PathBuf::from(kind.file_name());
    let err = |e: String| SegError::Plot { path: path.clone(), msg: e };
    if records.is_empty() {
        return Err(err("no epochs to plot".into()));
    }
    let (w, h) = PLOT_SIZE;
    let mut buf = vec![0u8; (w * h * 3) as usize];
    let train: Vec<(f64, f64)> = records.iter().map(|r| (r.epoch as f64, kind.value(&r.train))).collect();
    let val: Vec<(f64, f64)> = records.iter().map(|r| (r.epoch as f64, kind.value(&r.val))).collect();
    let (mut lo, mut hi) = train
        .iter()
        .chain(&val)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(err("non-finite metric values".into()));
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5f64.max(0.05 * hi.abs()) };
    lo -= pad;
    hi += pad;
    let first = records[0].epoch as f64;
    let last = records[records.len() - 1].epoch as f64;
    let (x0, x1) = if last > first { (first, last) } else { (first - 0.5, first + 0.5) };
    let text = plot_font_available();
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder
                .caption(kind.title(), ("sans-serif", 24))
                .x_label_area_size(40)
                .y_label_area_size(60);
        }
        let mut chart = builder.build_cartesian_2d(x0..x1, lo..hi).map_err(|e| err(e.to_string()))?;
        if text {
            chart
                .configure_mesh()
                .x_desc("epoch")
                .y_desc(kind.title())
                .draw()
                .map_err(|e| err(e.to_string()))?;
        } else {
            chart.plotting_area().fill(&WHITE).map_err(|e| err(e.to_string()))?;
        }
        for (points, color, name) in [(&train, BLUE, "train"), (&val, RED, "validation")] {
            let series = chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(e.to_string()))?;
            if text {
                series
                    .label(name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
            chart
                .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| err(e.to_string()))?;
        }
        if text {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(e.to_string()))?;
        }
        root.present().map_err(|e| err(e.to_string()))?;
    }
    RgbImage::from_raw(w, h, buf).ok_or_else(|| err("plot buffer size".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPaths {
    pub loss: PathBuf,
    pub iou: PathBuf,
    pub accuracy: PathBuf,
}

/// Writes `loss.png`, `iou.png` and `accuracy.png` into `out_dir`.
pub fn emit_plots(records: &[EpochRecord], out_dir: &Path) -> Result<PlotPaths> {
    let mut paths = Vec::new();
    for kind in PlotKind::ALL {
        let path = out_dir.join(kind.file_name());
        render_plot(records, kind)?.save(&path).map_err(|source| SegError::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(PlotPaths {
        loss: paths[0].clone(),
        iou: paths[1].clone(),
        accuracy: paths[2].clone(),
    })
}

/// Reads an RGB image, resizes it to the network input and predicts its class map.
pub fn predict_image(model: &mut Model, path: &Path) -> Result<ClassMask> {
    let image = resize_bilinear(&load_rgb(path)?, INPUT_SIZE, INPUT_SIZE)?;
    let sample = SegSample::new("input", image, ClassMask::filled(INPUT_SIZE, INPUT_SIZE, 0))?;
    let batch = Batch::from_samples([&sample])?;
    Ok(render_segmentation_map(&model.forward(&batch.images, Mode::Eval)?).remove(0))
}

/// Per-pixel argmax of logits `(B, C, H, W)`, one class map per item; ties
/// go to the lowest class index.
pub fn render_segmentation_map(logits: &Tensor) -> Vec<ClassMask> {
    let [n, _, h, w] = logits.shape();
    let classes = argmax_classes(logits);
    (0..n)
        .map(|i| ClassMask {
            width: w,
            height: h,
            data: classes[i * h * w..(i + 1) * h * w].to_vec(),
        })
        .collect()
}

/// The class map in VOC colours.
pub fn colorize(mask: &ClassMask) -> RgbImage {
    let mut img = RgbImage::new(mask.width as u32, mask.height as u32);
    for (px, &c) in img.pixels_mut().zip(&mask.data) {
        px.0 = voc_color(c);
    }
    img
}

pub fn save_map(path: &Path, mask: &ClassMask) -> Result<()> {
    write_palette_png(path, mask.width, mask.height, &mask.data)
}

/// Summary written to `results.json` at the end of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub name: String,
    pub label: String,
    pub arch: ArchId,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    /// Validation metrics at the best epoch.
    pub val: MetricSummary,
    /// Test metrics of the best checkpoint.
    pub test: MetricSummary,
}

pub const RESULTS_FILE: &str = "results.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const CONFIG_FILE: &str = "config.txt";
pub const MAPS_DIR: &str = "maps";

pub fn read_results(run_dir: &Path) -> Result<ResultsRow> {
    let path = run_dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(SegError::io(&path))?;
    serde_json::from_str(&text).map_err(|e| SegError::Invalid(format!("{}: {e}", path.display())))
}

const TABLE_HEADER: &str =
    "| Model | Val Loss | Val IoU | Val Accuracy (%) | Test Loss | Test IoU | Test Accuracy (%) |\n|---|---|---|---|---|---|---|\n";

/// Markdown table with one row per run directory; losses and IoU to four
/// decimals, accuracy as a percentage to two. Runs without results are
/// marked failed.
pub fn results_table(run_dirs: &[PathBuf]) -> String {
    let mut out = String::from(TABLE_HEADER);
    for dir in run_dirs {
        match read_results(dir) {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "| {} | {:.4} | {:.4} | {:.2} | {:.4} | {:.4} | {:.2} |",
                    r.label,
                    r.val.loss,
                    r.val.mean_iou,
                    100.0 * r.val.pixel_accuracy,
                    r.test.loss,
                    r.test.mean_iou,
                    100.0 * r.test.pixel_accuracy
                );
            }
            Err(_) => {
                let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                let _ = writeln!(out, "| {name} | failed | failed | failed | failed | failed | failed |");
            }
        }
    }
    out
}

/// Everything a completed run leaves in its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifactSet {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub plots: PlotPaths,
    pub maps: Vec<PathBuf>,
    pub results: PathBuf,
    pub row: ResultsRow,
}

fn load_limited(root: &DatasetRoot, split: Split, limit: Option<usize>) -> Result<Vec<SegSample>> {
    let ids = root.load_split(split)?;
    let take = limit.unwrap_or(ids.len()).min(ids.len());
    ids[..take].iter().map(|id| root.load_sample(id, INPUT_SIZE)).collect()
}

/// Trains, checkpoints the best epoch, evaluates it on the test split and
/// writes the metrics log, plots, maps and `results.json` under
/// `output_dir/name`.
pub fn run_experiment(config: &ExperimentConfig, mut progress: impl FnMut(&EpochRecord)) -> Result<RunArtifactSet> {
    config.validate()?;
    let root = DatasetRoot::open(config.resolve_data_root()?)?;
    let train = load_limited(&root, Split::Train, config.limits.train)?;
    let val = load_limited(&root, Split::Val, config.limits.val)?;
    let test = load_limited(&root, Split::Test, config.limits.test)?;
    let weights = if config.train.use_weights {
        Some(class_weights(&class_pixel_counts(&train))?)
    } else {
        None
    };

    let mut model = build_model(config.arch, NUM_CLASSES)?;
    model.xavier_init(&mut ChaCha8Rng::seed_from_u64(config.train.seed));
    if config.arch == ArchId::TransferResnet34 {
        if let Some(BackboneSource::File(path)) = &config.backbone_weights {
            model.load_backbone_weights(path)?;
        }
        model.freeze_encoder()?;
    }

    let dir = config.run_dir();
    fs::create_dir_all(dir.join(MAPS_DIR)).map_err(SegError::io(&dir))?;
    fs::write(dir.join(CONFIG_FILE), config.to_text()).map_err(SegError::io(dir.join(CONFIG_FILE)))?;
    let metrics = dir.join(METRICS_FILE);
    let mut log = MetricsLogWriter::create(&metrics)?;

    // Initialization consumed its own generator; training gets a distinct stream.
    let train_config = TrainConfig {
        seed: config.train.seed.wrapping_add(1),
        ..config.train.clone()
    };
    let mut trainer = SegTrainer::new(model, &train_config, &train, &val, config.augment, weights.clone())?;
    let outcome = fit(&config.train, &mut trainer, |record| {
        progress(record);
        log.append(record)
    })?;
    let best_record = outcome.records[outcome.best_epoch - 1];

    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, config.arch, NUM_CLASSES, &outcome.best, Some(&best_record))?;
    let (mut best_model, _) = load_checkpoint(&checkpoint)?;

    let test_batches = make_batches(&test, config.train.batch_size, false, 0)?;
    let test_report = evaluate(&mut best_model, &test_batches, weights.as_ref())?;

    let mut maps = Vec::new();
    for sample in test.iter().take(config.render_maps) {
        let batch = Batch::from_samples([sample])?;
        let logits = best_model.forward(&batch.images, Mode::Eval)?;
        let pred = render_segmentation_map(&logits).remove(0);
        for (suffix, mask) in [("pred", &pred), ("truth", &sample.mask)] {
            let path = dir.join(MAPS_DIR).join(format!("{}_{suffix}.png", sample.id));
            save_map(&path, mask)?;
            maps.push(path);
        }
    }

    let plots = emit_plots(&outcome.records, &dir)?;
    let row = ResultsRow {
        name: config.name.clone(),
        label: config.label.clone(),
        arch: config.arch,
        best_epoch: outcome.best_epoch,
        stop_epoch: outcome.stop_epoch,
        val: best_record.val,
        test: test_report.summary(),
    };
    let results = dir.join(RESULTS_FILE);
    let json = serde_json::to_string_pretty(&row).map_err(|e| SegError::Invalid(e.to_string()))?;
    fs::write(&results, json).map_err(SegError::io(&results))?;
    Ok(RunArtifactSet {
        dir,
        metrics,
        checkpoint,
        plots,
        maps,
        results,
        row,
    })
}
