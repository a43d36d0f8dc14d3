//! End-to-end experiments on synthetic scenes: depth estimation, the two
//! detection pipelines and the two segmentation schemes.
//!
//! Every run is a pure function of its [`ExperimentConfig`]: data, network
//! initialization, sampling and shuffling all derive from `seed`, and parallel
//! work is collected in input order.

mod config;
mod fast_rcnn;
mod features;
mod rcnn;
mod segmentation;
mod synthetic;

pub use config::{ExperimentConfig, FeatureMode, FusionPoint, PipelineKind, SegScheme};
pub use fast_rcnn::{run_fast_rcnn_pipeline, sample_rois, FastRcnnNet, RoiSample};
pub use features::{softmax_cross_entropy, RegionNet, CROP_SIZE, FEATURE_DIM};
pub use rcnn::{run_rcnn_pipeline, RCNN_ROWS};
pub use segmentation::{
    depth_stream_plan, prepare_samples, run_segmentation_pipeline, run_sweep, train_concat, train_multitask, train_rgb_only,
    ConcatSegNet, MultiTaskNet, SegOutcome, SegSample,
};
pub use synthetic::{
    background_depth, class_band, class_for_depth, floor_depth, generate_scene, generate_synthetic, generate_synthetic_sized,
    load_dataset, save_dataset, Dataset, ObjectInstance, SyntheticScene, FAR_DEPTH,
};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crf::dcnf::{train_dcnf, DcnfArch, DcnfModel, DcnfReport, DcnfSample, DcnfTraining};
use crate::depth_io::DepthMap;
use crate::error::{Error, Result};
use crate::eval::{svg_line_plot, BBox, Detection, EvalReport};
use crate::netcore::LrSchedule;
use crate::superpixel::SegmentationMode;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "DEPTHFUSE_THREADS";

/// Worker threads from `DEPTHFUSE_THREADS`, or all available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool of [`thread_count`] workers.
pub fn with_threads<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    pool.install(f)
}

/// Independent stream for a named component of a run.
pub(crate) fn component_seed(seed: u64, component: &str) -> u64 {
    component.bytes().fold(seed ^ 0xA076_1D64_78BD_642F, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01B3)
    })
}

pub fn load_or_generate(config: &ExperimentConfig) -> Result<Dataset> {
    let data = match &config.data {
        Some(dir) => load_dataset(dir)?,
        None => generate_synthetic_sized(config.images, config.classes, config.seed, config.height, config.width)?,
    };
    if data.scenes.len() < 2 {
        return Err(Error::Data("dataset needs at least two images".into()));
    }
    Ok(data)
}

pub fn dcnf_arch(config: &ExperimentConfig) -> DcnfArch {
    DcnfArch {
        superpixels: config.superpixels,
        gamma: config.gamma,
        segmentation: SegmentationMode::slic(),
        ..DcnfArch::default()
    }
}

pub fn dcnf_training(config: &ExperimentConfig) -> DcnfTraining {
    DcnfTraining {
        epochs: config.dcnf_epochs,
        schedule: LrSchedule {
            base: config.dcnf_lr,
            decay: config.lr_decay,
            every: config.lr_step,
            weight_decay: config.weight_decay,
        },
        shuffle_seed: component_seed(config.seed, "dcnf-shuffle"),
        ..DcnfTraining::default()
    }
}

/// Trains a depth model on the given scenes (graphs built in parallel).
pub fn train_depth_model(config: &ExperimentConfig, scenes: &[SyntheticScene]) -> Result<(DcnfModel, DcnfReport)> {
    let mut model = DcnfModel::new(dcnf_arch(config), [1.0; 3], component_seed(config.seed, "dcnf-init"))?;
    let samples: Vec<DcnfSample> = scenes
        .par_iter()
        .map(|s| model.sample(s.image.clone(), &s.depth))
        .collect::<Result<_>>()?;
    let (sum, count) = samples
        .iter()
        .flat_map(|s| &s.y_gt)
        .fold((0.0, 0usize), |(s, n), &y| (s + y, n + 1));
    model.set_output_bias(sum / count.max(1) as f64);
    let report = train_dcnf(&samples, &mut model, &dcnf_training(config))?;
    Ok((model, report))
}

/// Depth model plus its estimate for every scene.
pub struct DepthStage {
    pub model: DcnfModel,
    pub report: Option<DcnfReport>,
    pub estimated: Vec<DepthMap>,
}

impl DepthStage {
    /// Per-epoch training NLL per node, when the model was trained in this run.
    pub fn telemetry(&self) -> Option<Telemetry> {
        self.report.as_ref().map(|r| Telemetry {
            columns: ["nll_per_node", "unused", "total"],
            rows: r.epoch_nll.iter().map(|&v| [v, 0.0, v]).collect(),
        })
    }
}

/// Loads `dcnf_model` or trains one on the training split, then predicts all scenes.
pub fn estimate_depths(config: &ExperimentConfig, data: &Dataset) -> Result<DepthStage> {
    let train = config.train_count().min(data.scenes.len() - 1);
    let (model, report) = match &config.dcnf_model {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| {
                Error::Data(format!(
                    "cannot open depth model {} ({e}); train one with `depthfuse dcnf-train` or drop dcnf_model to train in-run",
                    path.display()
                ))
            })?;
            (DcnfModel::load(std::io::BufReader::new(file))?, None)
        }
        None => {
            let (m, r) = train_depth_model(config, &data.scenes[..train])?;
            (m, Some(r))
        }
    };
    let estimated = data
        .scenes
        .par_iter()
        .map(|s| Ok(model.predict(&s.image)?.depth))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthStage {
        model,
        report,
        estimated,
    })
}

fn push_box(out: &mut Vec<BBox>, b: BBox, h: usize, w: usize) {
    let b = [
        b[0].clamp(0.0, w as f64 - 1.0).floor(),
        b[1].clamp(0.0, h as f64 - 1.0).floor(),
        b[2].clamp(1.0, w as f64).ceil(),
        b[3].clamp(1.0, h as f64).ceil(),
    ];
    if b[2] - b[0] >= 3.0 && b[3] - b[1] >= 3.0 && !out.contains(&b) {
        out.push(b);
    }
}

/// Class-agnostic proposals: jittered ground truth, random boxes and a sliding
/// grid. Deterministic in `(seed, image_id)`.
pub fn generate_proposals(scene: &SyntheticScene, image_id: usize, seed: u64) -> Vec<BBox> {
    let (h, w) = (scene.image.height, scene.image.width);
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(seed, "proposals") ^ image_id as u64);
    let mut out = Vec::new();
    for o in &scene.objects {
        let [x1, y1, x2, y2] = o.bbox;
        let (bw, bh) = (x2 - x1, y2 - y1);
        for _ in 0..4 {
            let s: f64 = rng.gen_range(0.8..1.25);
            let (cx, cy) = (
                x1 + bw / 2.0 + rng.gen_range(-0.25..0.25) * bw,
                y1 + bh / 2.0 + rng.gen_range(-0.25..0.25) * bh,
            );
            let (nw, nh) = (bw * s * rng.gen_range(0.85..1.15), bh * s);
            push_box(&mut out, [cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0], h, w);
        }
    }
    for _ in 0..8 {
        let bw = rng.gen_range(4.0..0.5 * w as f64);
        let bh = rng.gen_range(4.0..0.5 * h as f64);
        let x = rng.gen_range(0.0..w as f64 - bw);
        let y = rng.gen_range(0.0..h as f64 - bh);
        push_box(&mut out, [x, y, x + bw, y + bh], h, w);
    }
    for frac in [0.3, 0.5] {
        let (sw, sh) = ((frac * w as f64).round(), (frac * h as f64).round());
        let (stride_x, stride_y) = ((sw / 2.0).max(1.0) + 1.0, (sh / 2.0).max(1.0) + 1.0);
        let mut y = 0.0;
        while y + sh <= h as f64 {
            let mut x = 0.0;
            while x + sw <= w as f64 {
                push_box(&mut out, [x, y, x + sw, y + sh], h, w);
                x += stride_x;
            }
            y += stride_y;
        }
    }
    out
}

/// Per-epoch losses; the first column is the epoch index.
#[derive(Debug, Clone, PartialEq)]
pub struct Telemetry {
    pub columns: [&'static str; 3],
    pub rows: Vec<[f64; 3]>,
}

impl Telemetry {
    pub fn segmentation() -> Self {
        Telemetry {
            columns: ["l_color", "l_depth", "total"],
            rows: Vec::new(),
        }
    }

    pub fn detection() -> Self {
        Telemetry {
            columns: ["l_cls", "l_loc", "total"],
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let [a, b, c] = self.columns;
        let mut s = format!("epoch,{a},{b},{c}\n");
        for (epoch, [x, y, z]) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "{epoch},{x},{y},{z}");
        }
        s
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[2]).collect()
    }

    pub fn to_svg(&self, title: &str) -> String {
        let series: Vec<(String, Vec<(f64, f64)>)> = (0..3)
            .map(|k| {
                (
                    self.columns[k].to_string(),
                    self.rows.iter().enumerate().map(|(e, r)| (e as f64, r[k])).collect(),
                )
            })
            .collect();
        svg_line_plot(title, "epoch", "loss", &series)
    }
}

/// Everything a pipeline run produces. Names are used as file stems.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub reports: Vec<(String, EvalReport)>,
    pub telemetry: Vec<(String, Telemetry)>,
    pub detections: Vec<(String, Vec<Detection>)>,
    /// Extra SVG figures (precision/recall curves).
    pub figures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl PipelineOutput {
    pub fn report(&self, name: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    /// All report tables as one Markdown document.
    pub fn summary_markdown(&self) -> String {
        let mut s = String::new();
        for (_, r) in &self.reports {
            s.push_str(&r.to_markdown());
            s.push('\n');
        }
        s
    }

    /// Writes reports (`.md`, `.csv`), loss telemetry, detections and, when
    /// `plots` is set, SVG figures into `dir`.
    pub fn write_to(&self, dir: &Path, config: &ExperimentConfig, plots: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.to_text())?;
        fs::write(dir.join("summary.md"), self.summary_markdown())?;
        for (name, r) in &self.reports {
            fs::write(dir.join(format!("{name}.md")), r.to_markdown())?;
            fs::write(dir.join(format!("{name}.csv")), r.to_csv())?;
        }
        for (name, t) in &self.telemetry {
            fs::write(dir.join(format!("{name}_loss.csv")), t.to_csv())?;
            if plots {
                fs::write(dir.join(format!("{name}_loss.svg")), t.to_svg(name))?;
            }
        }
        for (name, dets) in &self.detections {
            let mut buf = Vec::new();
            crate::eval::write_detections(&mut buf, dets)?;
            fs::write(dir.join(format!("{name}_detections.csv")), buf)?;
        }
        if plots {
            for (name, svg) in &self.figures {
                fs::write(dir.join(format!("{name}.svg")), svg)?;
            }
        }
        Ok(())
    }
}

/// Validates the config and runs the pipeline it names.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let warnings = config.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut out = with_threads(|| match config.pipeline {
        PipelineKind::Rcnn => run_rcnn_pipeline(config),
        PipelineKind::FastRcnn => run_fast_rcnn_pipeline(config),
        PipelineKind::Segment => run_segmentation_pipeline(config, config.scheme),
        PipelineKind::Sweep => run_sweep(config),
    })?;
    out.warnings.splice(0..0, warnings);
    Ok(out)
}

pub(crate) fn class_names(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("class{k}")).collect()
}
