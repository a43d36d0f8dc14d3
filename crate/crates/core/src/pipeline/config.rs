//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so command
//! line overrides are applied with [`ExperimentConfig::set`] after the file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::netcore::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Rcnn,
    FastRcnn,
    Segment,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegScheme {
    Concat,
    Multitask,
}

/// Layer after which the RGB and depth streams of the concatenation scheme merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionPoint {
    Pool5,
    Fc6,
    Fc7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Region networks trained on the detection labels.
    Finetune,
    /// Region networks trained only on an autoencoder pretext task, then frozen.
    Frozen,
}

macro_rules! keyword_enum {
    ($ty:ident { $($name:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?} (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

keyword_enum!(PipelineKind { "rcnn" => Rcnn, "fast-rcnn" => FastRcnn, "segment" => Segment, "sweep" => Sweep });
keyword_enum!(SegScheme { "concat" => Concat, "multitask" => Multitask });
keyword_enum!(FusionPoint { "pool5" => Pool5, "fc6" => Fc6, "fc7" => Fc7 });
keyword_enum!(FeatureMode { "finetune" => Finetune, "frozen" => Frozen });

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub images: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    /// Dataset directory written by `gen-data`; generated in memory when absent.
    pub data: Option<PathBuf>,
    /// Trained depth model; trained in-run when absent.
    pub dcnf_model: Option<PathBuf>,

    pub superpixels: usize,
    pub gamma: f64,
    pub dcnf_epochs: usize,
    pub dcnf_lr: f64,

    /// Reference learning rate; the step actually taken is `lr * lr_scale`.
    pub lr: f64,
    pub lr_scale: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub normalize_loss: bool,

    pub lambda: f64,
    pub lambda_det: f64,
    pub depth_layers: usize,
    pub scheme: SegScheme,
    pub fusion: FusionPoint,
    pub features: FeatureMode,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_layers: Vec<usize>,

    pub svm_c: f64,
    pub svm_b: f64,
    pub svm_w1: f64,
    pub nms: f64,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub ap_mode: ApMode,

    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: 32x32 synthetic scenes, toy networks.
    fn default() -> Self {
        let schedule = LrSchedule::default();
        ExperimentConfig {
            pipeline: PipelineKind::Rcnn,
            seed: 7,
            images: 200,
            classes: 3,
            height: 32,
            width: 32,
            train_fraction: 0.5,
            data: None,
            dcnf_model: None,
            superpixels: 64,
            gamma: crate::superpixel::DEFAULT_GAMMA,
            dcnf_epochs: 8,
            dcnf_lr: 0.02,
            lr: schedule.base,
            lr_scale: 1e5,
            lr_decay: schedule.decay,
            lr_step: schedule.every,
            weight_decay: schedule.weight_decay,
            epochs: 10,
            normalize_loss: false,
            lambda: 1.0,
            lambda_det: crate::fusion::DEFAULT_LAMBDA_DET,
            depth_layers: 3,
            scheme: SegScheme::Multitask,
            fusion: FusionPoint::Pool5,
            features: FeatureMode::Finetune,
            sweep_lambdas: vec![0.0, 0.1, 1.0, 10.0, 50.0],
            sweep_layers: vec![2, 3, 5],
            svm_c: 0.001,
            svm_b: 10.0,
            svm_w1: 2.0,
            nms: crate::detector::DEFAULT_NMS_THRESHOLD,
            rois_per_image: 32,
            fg_fraction: 0.25,
            ap_mode: ApMode::AllPoint,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn for_pipeline(pipeline: PipelineKind) -> Self {
        ExperimentConfig {
            pipeline,
            ..Self::default()
        }
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.merge(text)?;
        Ok(config)
    }

    pub fn merge(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pipeline" => self.pipeline = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "images" => self.images = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dcnf_model" => self.dcnf_model = (!value.is_empty()).then(|| PathBuf::from(value)),
            "superpixels" => self.superpixels = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "dcnf_epochs" => self.dcnf_epochs = parse(key, value)?,
            "dcnf_lr" => self.dcnf_lr = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_step" => self.lr_step = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "normalize_loss" => self.normalize_loss = parse_bool(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lambda_det" => self.lambda_det = parse(key, value)?,
            "depth_layers" => self.depth_layers = parse(key, value)?,
            "scheme" => self.scheme = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "features" => self.features = value.parse()?,
            "sweep_lambdas" => self.sweep_lambdas = parse_list(key, value)?,
            "sweep_layers" => self.sweep_layers = parse_list(key, value)?,
            "svm_c" => self.svm_c = parse(key, value)?,
            "svm_b" => self.svm_b = parse(key, value)?,
            "svm_w1" => self.svm_w1 = parse(key, value)?,
            "nms" => self.nms = parse(key, value)?,
            "rois_per_image" => self.rois_per_image = parse(key, value)?,
            "fg_fraction" => self.fg_fraction = parse(key, value)?,
            "ap_mode" => {
                self.ap_mode = match value {
                    "all" | "all-point" => ApMode::AllPoint,
                    "11" | "11-point" => ApMode::ElevenPoint,
                    _ => return Err(Error::Config(format!("ap_mode: expected all or 11, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr * self.lr_scale,
            decay: self.lr_decay,
            every: self.lr_step,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_count(&self) -> usize {
        ((self.images as f64 * self.train_fraction).round() as usize).clamp(1, self.images.saturating_sub(1).max(1))
    }

    /// Checks value ranges, and returns warnings for settings that the chosen
    /// pipeline ignores.
    pub fn validate(&self) -> Result<Vec<String>> {
        let fail = |m: String| Err(Error::Config(m));
        if self.images < 2 {
            return fail(format!("images must be at least 2 (train and test), got {}", self.images));
        }
        if self.classes < 1 || self.classes > 254 {
            return fail(format!("classes must be in [1, 254], got {}", self.classes));
        }
        if self.height < 16 || self.width < 16 {
            return fail(format!("images must be at least 16x16, got {}x{}", self.height, self.width));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        if self.superpixels == 0 || self.superpixels > self.height * self.width {
            return fail(format!("superpixels must be in [1, {}]", self.height * self.width));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_det", self.lambda_det),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.sweep_lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return fail("sweep_lambdas must be non-negative".into());
        }
        for &n in std::iter::once(&self.depth_layers).chain(&self.sweep_layers) {
            if !matches!(n, 2 | 3 | 5) {
                return fail(format!("depth stream depth must be 2, 3 or 5, got {n}"));
            }
        }
        if !(self.lr > 0.0 && self.lr_scale > 0.0 && self.dcnf_lr > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(self.svm_c > 0.0 && self.svm_w1 > 0.0 && self.svm_b >= 0.0) {
            return fail("svm_c and svm_w1 must be positive, svm_b non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.nms) || !(0.0..=1.0).contains(&self.fg_fraction) {
            return fail("nms and fg_fraction must lie in [0, 1]".into());
        }
        if self.rois_per_image == 0 || self.epochs == 0 {
            return fail("rois_per_image and epochs must be positive".into());
        }

        let mut warnings = Vec::new();
        let mut ignored = |keys: &[&str], why: &str| {
            for k in keys {
                if self.is_explicit(k) {
                    warnings.push(format!("`{k}` has no effect {why}"));
                }
            }
        };
        match self.pipeline {
            PipelineKind::Segment if self.scheme == SegScheme::Concat => {
                ignored(&["lambda", "depth_layers"], "with the concat scheme");
                ignored(
                    &[
                        "lambda_det",
                        "svm_c",
                        "svm_b",
                        "svm_w1",
                        "nms",
                        "rois_per_image",
                        "fg_fraction",
                    ],
                    "for segmentation",
                );
            }
            PipelineKind::Segment | PipelineKind::Sweep => {
                if self.scheme == SegScheme::Multitask {
                    ignored(&["fusion"], "with the multitask scheme");
                }
                ignored(
                    &[
                        "lambda_det",
                        "svm_c",
                        "svm_b",
                        "svm_w1",
                        "nms",
                        "rois_per_image",
                        "fg_fraction",
                    ],
                    "for segmentation",
                );
            }
            PipelineKind::Rcnn => ignored(
                &[
                    "lambda",
                    "depth_layers",
                    "scheme",
                    "fusion",
                    "lambda_det",
                    "rois_per_image",
                    "fg_fraction",
                ],
                "for the R-CNN pipeline",
            ),
            PipelineKind::FastRcnn => ignored(
                &[
                    "lambda",
                    "depth_layers",
                    "scheme",
                    "fusion",
                    "svm_c",
                    "svm_b",
                    "svm_w1",
                    "features",
                ],
                "for the Fast R-CNN pipeline",
            ),
        }
        if self.pipeline == PipelineKind::Sweep {
            ignored(&["lambda", "depth_layers"], "in a sweep (use sweep_lambdas / sweep_layers)");
        }
        let pixels = (self.height * self.width) as f64;
        let summed = matches!(self.pipeline, PipelineKind::Segment | PipelineKind::Sweep) && !self.normalize_loss;
        if summed && self.schedule().base * pixels > 1.0 {
            warnings.push(format!(
                "segmentation losses are summed over {pixels} pixels; a step of {} will likely diverge (set normalize_loss = true or lower lr_scale)",
                self.schedule().base
            ));
        }
        Ok(warnings)
    }

    /// Full effective configuration in the file format (explicit or not).
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let ap = match self.ap_mode {
            ApMode::AllPoint => "all",
            ApMode::ElevenPoint => "11",
        };
        format!(
            "pipeline = {}\nseed = {}\nimages = {}\nclasses = {}\nheight = {}\nwidth = {}\ntrain_fraction = {}\n\
             data = {}\ndcnf_model = {}\nsuperpixels = {}\ngamma = {}\ndcnf_epochs = {}\ndcnf_lr = {}\n\
             lr = {}\nlr_scale = {}\nlr_decay = {}\nlr_step = {}\nweight_decay = {}\nepochs = {}\nnormalize_loss = {}\n\
             lambda = {}\nlambda_det = {}\ndepth_layers = {}\nscheme = {}\nfusion = {}\nfeatures = {}\n\
             sweep_lambdas = {}\nsweep_layers = {}\nsvm_c = {}\nsvm_b = {}\nsvm_w1 = {}\nnms = {}\n\
             rois_per_image = {}\nfg_fraction = {}\nap_mode = {ap}\n",
            self.pipeline,
            self.seed,
            self.images,
            self.classes,
            self.height,
            self.width,
            self.train_fraction,
            path(&self.data),
            path(&self.dcnf_model),
            self.superpixels,
            self.gamma,
            self.dcnf_epochs,
            self.dcnf_lr,
            self.lr,
            self.lr_scale,
            self.lr_decay,
            self.lr_step,
            self.weight_decay,
            self.epochs,
            self.normalize_loss,
            self.lambda,
            self.lambda_det,
            self.depth_layers,
            self.scheme,
            self.fusion,
            self.features,
            join(&self.sweep_lambdas),
            join(&self.sweep_layers),
            self.svm_c,
            self.svm_b,
            self.svm_w1,
            self.nms,
            self.rois_per_image,
            self.fg_fraction,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_schedule() {
        let c = ExperimentConfig::default();
        assert_eq!(c.lr, 1e-7);
        assert_eq!(c.lr_decay, 0.4);
        assert_eq!(c.lr_step, 5);
        assert_eq!(c.weight_decay, 5e-4);
        assert_eq!((c.svm_c, c.svm_b, c.svm_w1, c.nms), (0.001, 10.0, 2.0, 0.3));
        assert_eq!(c.sweep_lambdas, vec![0.0, 0.1, 1.0, 10.0, 50.0]);
        assert!(c.validate().unwrap().is_empty());
    }

    #[test]
    fn text_round_trip() {
        let mut c =
            ExperimentConfig::parse("pipeline = segment\n# comment\nlambda = 0.1 # inline\nsweep_layers = 2,5\n").unwrap();
        c.set("seed", "11").unwrap();
        assert_eq!(c.pipeline, PipelineKind::Segment);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.sweep_layers, vec![2, 5]);
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(matches!(ExperimentConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("lambda"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("scheme = late"), Err(Error::Config(_))));
        let c = ExperimentConfig::parse("lambda = -1").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::parse("depth_layers = 4").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn lambda_with_concat_scheme_warns() {
        let c = ExperimentConfig::parse("pipeline = segment\nscheme = concat\nlambda = 1\nnormalize_loss = true").unwrap();
        let w = c.validate().unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("lambda"));
    }
}
