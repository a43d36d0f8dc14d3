use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depthfuse::crf::dcnf::DcnfModel;
use depthfuse::depth_io::{read_ppm, write_depth_csv, write_depth_pgm};
use depthfuse::eval::{evaluate_detections, read_detections, ApMode, EvalReport, GroundTruth};
use depthfuse::pipeline::{
    generate_synthetic_sized, load_or_generate, run_pipeline, save_dataset, train_depth_model, with_threads, ExperimentConfig,
    PipelineKind, SegScheme,
};

#[derive(Parser)]
#[command(
    name = "depthfuse",
    version,
    about = "RGB-D detection and segmentation with estimated depth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            };
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for reports, telemetry and detections.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write SVG loss curves and precision/recall plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the depth model on the training split and save it.
    DcnfTrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; a synthetic set is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        superpixels: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a depth map for one PPM image (PGM output, or CSV for a `.csv` path).
    DcnfPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Region detection with per-class SVMs over RGB and depth features.
    Rcnn(RunArgs),
    /// Two-stream RoI-pooling detector with joint class and box loss.
    FastRcnn(RunArgs),
    /// Semantic segmentation (multitask or concat scheme).
    Segment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        scheme: Option<SegScheme>,
    },
    /// Multi-task segmentation over the depth-weight and depth-layer grid.
    Sweep(RunArgs),
    /// Score a detections CSV against a dataset's ground truth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score against every image instead of the test split only.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        eleven_point: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(kind: PipelineKind, args: &RunArgs, scheme: Option<SegScheme>) -> Result<()> {
    let mut config = args.config.load()?;
    config.pipeline = kind;
    if let Some(s) = scheme {
        config.scheme = s;
    }
    let out = run_pipeline(&config)?;
    out.write_to(&args.out, &config, args.plots)?;
    print!("{}", out.summary_markdown());
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("results written to {}", args.out.display());
    Ok(())
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.to_markdown());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.md"), report.to_markdown())?;
        fs::write(dir.join("eval.csv"), report.to_csv())?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            config,
            images,
            classes,
            seed,
            out,
        } => {
            let mut c = config.load()?;
            c.images = images.unwrap_or(c.images);
            c.classes = classes.unwrap_or(c.classes);
            c.seed = seed.unwrap_or(c.seed);
            let data = generate_synthetic_sized(c.images, c.classes, c.seed, c.height, c.width)?;
            save_dataset(&out, &data)?;
            eprintln!("{} images with {} classes written to {}", c.images, c.classes, out.display());
        }
        Command::DcnfTrain {
            config,
            data,
            superpixels,
            gamma,
            epochs,
            out,
        } => {
            let mut c = config.load()?;
            c.data = data.or(c.data);
            c.superpixels = superpixels.unwrap_or(c.superpixels);
            c.gamma = gamma.unwrap_or(c.gamma);
            c.dcnf_epochs = epochs.unwrap_or(c.dcnf_epochs);
            c.validate()?;
            let dataset = load_or_generate(&c)?;
            let train = c.train_count().min(dataset.scenes.len() - 1);
            let (model, report) = with_threads(|| train_depth_model(&c, &dataset.scenes[..train]))?;
            for (epoch, (nll, beta)) in report.epoch_nll.iter().zip(&report.beta_history).enumerate() {
                println!("epoch {epoch}: nll/node {nll:.5} beta {beta:?}");
            }
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            model.save(std::io::BufWriter::new(file))?;
            eprintln!("model written to {}", out.display());
        }
        Command::DcnfPredict { model, image, out } => {
            let file = fs::File::open(&model).with_context(|| format!("opening model {}", model.display()))?;
            let model = DcnfModel::load(BufReader::new(file))?;
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let depth = model.predict(&read_ppm(&bytes)?)?.depth;
            let mut buf = Vec::new();
            if out.extension().is_some_and(|e| e == "csv") {
                write_depth_csv(&mut buf, &depth)?;
            } else {
                write_depth_pgm(&mut buf, &depth)?;
            }
            fs::write(&out, buf)?;
            if let Some((lo, hi)) = depth.range() {
                eprintln!("depth range {lo:.3}..{hi:.3} written to {}", out.display());
            }
        }
        Command::Rcnn(args) => run(PipelineKind::Rcnn, &args, None)?,
        Command::FastRcnn(args) => run(PipelineKind::FastRcnn, &args, None)?,
        Command::Segment { run: args, scheme } => run(PipelineKind::Segment, &args, scheme)?,
        Command::Sweep(args) => run(PipelineKind::Sweep, &args, None)?,
        Command::Eval {
            config,
            detections,
            data,
            all,
            eleven_point,
            out,
        } => {
            let mut c = config.load()?;
            c.data = data.or(c.data);
            let dataset = load_or_generate(&c)?;
            let file = fs::File::open(&detections).with_context(|| format!("opening {}", detections.display()))?;
            let first = if all {
                0
            } else {
                c.train_count().min(dataset.scenes.len() - 1)
            };
            let dets: Vec<_> = read_detections(BufReader::new(file))?
                .into_iter()
                .filter(|d| d.image_id >= first)
                .collect();
            let gts: Vec<GroundTruth> = dataset.ground_truths(first..dataset.scenes.len());
            let mode = if eleven_point { ApMode::ElevenPoint } else { c.ap_mode };
            let eval = evaluate_detections(&dets, &gts, dataset.num_classes, depthfuse::eval::DEFAULT_IOU_THRESHOLD, mode);
            let classes = (1..=dataset.num_classes).map(|k| format!("class{k}")).collect();
            let mut report = EvalReport::new("Detection, AP (%)", "mAP", classes);
            let label = detections
                .file_stem()
                .map_or("detections".into(), |s| s.to_string_lossy().into_owned());
            report.push(label, eval.per_class, eval.map);
            write_report(&report, out.as_deref())?;
        }
    }
    Ok(())
}
