//! Semantic segmentation with depth. The multi-task scheme regresses estimated
//! depth from the shared trunk as an auxiliary loss; the concatenation scheme
//! runs RGB and encoded depth through separate streams and joins them at a
//! chosen layer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    class_names, component_seed, estimate_depths, load_or_generate, Dataset, DepthStage, ExperimentConfig, FusionPoint,
    PipelineOutput, SegScheme, Telemetry,
};
use crate::depth_io::encode_depth;
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, EvalReport, SegmentationIou};
use crate::fusion::{
    combined_seg_loss, concat_features, depth_regression_loss, spatial_softmax_loss, split_channels, upscale_nearest,
    upscale_nearest_backward,
};
use crate::netcore::{FeatureMap, Layer, Sequential};

const TRUNK_CHANNELS: usize = 16;

/// One scene prepared for segmentation.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub image: FeatureMap,
    /// Three-channel encoding of the estimated depth.
    pub depth_code: FeatureMap,
    /// Estimated log depth, `(1, 1, h, w)`.
    pub log_depth: FeatureMap,
    pub labels: Vec<u8>,
}

pub fn prepare_samples(data: &Dataset, depth: &DepthStage) -> Result<Vec<SegSample>> {
    if depth.estimated.len() != data.scenes.len() {
        return Err(Error::Argument(format!(
            "{} depth estimates for {} scenes",
            depth.estimated.len(),
            data.scenes.len()
        )));
    }
    (0..data.scenes.len())
        .into_par_iter()
        .map(|i| {
            let s = &data.scenes[i];
            let d = &depth.estimated[i];
            Ok(SegSample {
                image: s.image.to_feature_map(),
                depth_code: encode_depth(d)?.to_feature_map(),
                log_depth: d.log_feature_map(),
                labels: s.labels.clone(),
            })
        })
        .collect()
}

/// Channel widths of the depth-regression stream with `n` layers.
pub fn depth_stream_plan(n: usize) -> Result<Vec<usize>> {
    match n {
        2 => Ok(vec![4, 1]),
        3 => Ok(vec![8, 4, 1]),
        5 => Ok(vec![16, 16, 8, 4, 1]),
        _ => Err(Error::Config(format!("depth stream depth must be 2, 3 or 5, got {n}"))),
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// conv 3x3, relu, 2x2 pool, conv 3x3, relu: half resolution, 16 channels.
fn trunk(in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Layer>> {
    Ok(vec![
        Layer::conv(in_channels, 8, 3, rng)?,
        Layer::relu(),
        Layer::max_pool(2, 2)?,
        Layer::conv(8, TRUNK_CHANNELS, 3, rng)?,
        Layer::relu(),
    ])
}

fn argmax_labels(logits: &FeatureMap) -> Vec<u8> {
    let [_, d, h, w] = logits.shape();
    let plane = h * w;
    let data = logits.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..d {
                if data[k * plane + i] > data[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

fn set_last_bias(net: &mut Sequential, prior: &[f64]) {
    if let Some(Layer::Conv(c)) = net.layers.last_mut() {
        for (b, p) in c.params.bias.value.iter_mut().zip(prior) {
            *b = p.max(1e-4).ln();
        }
    }
}

/// Label frequencies over the given samples, ignoring unlabelled pixels.
fn label_prior(samples: &[SegSample], num_labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_labels];
    for s in samples {
        for &l in &s.labels {
            if (l as usize) < num_labels {
                counts[l as usize] += 1;
            }
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn loss_scale(sample: &SegSample, normalize: bool) -> f64 {
    if normalize {
        1.0 / sample.labels.len() as f64
    } else {
        1.0
    }
}

trait SegModel: Sync {
    /// One SGD step on one image; returns `[l_color, l_depth, total]`.
    fn step(&mut self, sample: &SegSample, lambda: f64, normalize: bool, lr: f64, weight_decay: f64) -> Result<[f64; 3]>;
    fn predict(&self, sample: &SegSample) -> Result<Vec<u8>>;
}

#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub trunk: Sequential,
    /// Trunk features to per-pixel class logits at half resolution.
    pub color: Sequential,
    /// Trunk features to log depth at half resolution; absent for an RGB-only net.
    pub depth: Option<Sequential>,
}

impl MultiTaskNet {
    /// Trunk, colour head and depth stream draw from separate random streams,
    /// so the first two do not depend on `depth_layers`.
    pub fn new(num_labels: usize, depth_layers: Option<usize>, seed: u64) -> Result<Self> {
        let trunk = Sequential::new(trunk(3, &mut rng(seed, 0))?);
        let mut r = rng(seed, 1);
        let color = Sequential::new(vec![
            Layer::conv(TRUNK_CHANNELS, TRUNK_CHANNELS, 3, &mut r)?,
            Layer::relu(),
            Layer::conv(TRUNK_CHANNELS, num_labels, 1, &mut r)?,
        ]);
        let depth = match depth_layers {
            None => None,
            Some(n) => {
                let mut r = rng(seed, 2);
                let plan = depth_stream_plan(n)?;
                let mut layers = Vec::new();
                let mut width = TRUNK_CHANNELS;
                for (i, &out) in plan.iter().enumerate() {
                    layers.push(Layer::conv(width, out, 3, &mut r)?);
                    if i + 1 < plan.len() {
                        layers.push(Layer::relu());
                    }
                    width = out;
                }
                Some(Sequential::new(layers))
            }
        };
        Ok(MultiTaskNet { trunk, color, depth })
    }

    /// Sets the classifier biases to the log label frequencies.
    pub fn set_label_prior(&mut self, prior: &[f64]) {
        set_last_bias(&mut self.color, prior);
    }

    /// Starts the depth output at a constant: zero weights and bias `value`.
    pub fn set_depth_bias(&mut self, value: f64) {
        if let Some(Layer::Conv(c)) = self.depth.as_mut().and_then(|d| d.layers.last_mut()) {
            c.params.weights.value.fill(0.0);
            c.params.bias.value[0] = value;
        }
    }

    /// Per-pixel log depth at input resolution.
    pub fn predict_depth(&self, image: &FeatureMap) -> Result<Option<FeatureMap>> {
        let Some(depth) = &self.depth else { return Ok(None) };
        let f = depth.infer(&self.trunk.infer(image)?)?;
        Ok(Some(upscale_nearest(&f, image.height(), image.width())?))
    }
}

impl SegModel for MultiTaskNet {
    fn step(&mut self, sample: &SegSample, lambda: f64, normalize: bool, lr: f64, weight_decay: f64) -> Result<[f64; 3]> {
        let [_, _, h, w] = sample.image.shape();
        let scale = loss_scale(sample, normalize);
        let t = self.trunk.forward(&sample.image)?;
        let m = self.color.forward(&t)?;
        let (l_color, mut g) = spatial_softmax_loss(&upscale_nearest(&m, h, w)?, &sample.labels)?;
        g.scale(scale);
        let mut grad_t = self.color.backward(&upscale_nearest_backward(&g, m.shape())?)?;
        let mut l_depth = 0.0;
        if let Some(depth) = &mut self.depth {
            if lambda > 0.0 {
                let f = depth.forward(&t)?;
                let (l, mut g) = depth_regression_loss(&upscale_nearest(&f, h, w)?, &sample.log_depth)?;
                g.scale(lambda * scale);
                grad_t.add_assign(&depth.backward(&upscale_nearest_backward(&g, f.shape())?)?)?;
                depth.sgd_step(lr, weight_decay)?;
                l_depth = l;
            } else {
                let f = depth.infer(&t)?;
                l_depth = depth_regression_loss(&upscale_nearest(&f, h, w)?, &sample.log_depth)?.0;
            }
        }
        self.trunk.backward(&grad_t)?;
        self.trunk.sgd_step(lr, weight_decay)?;
        self.color.sgd_step(lr, weight_decay)?;
        let (l_color, l_depth) = (l_color * scale, l_depth * scale);
        Ok([l_color, l_depth, combined_seg_loss(l_color, l_depth, lambda)?])
    }

    fn predict(&self, sample: &SegSample) -> Result<Vec<u8>> {
        let [_, _, h, w] = sample.image.shape();
        let m = self.color.infer(&self.trunk.infer(&sample.image)?)?;
        Ok(argmax_labels(&upscale_nearest(&m, h, w)?))
    }
}

#[derive(Debug, Clone)]
pub struct ConcatSegNet {
    pub fusion: FusionPoint,
    pub rgb: Sequential,
    pub depth: Option<Sequential>,
    /// Concatenated features to class logits.
    pub head: Sequential,
}

impl ConcatSegNet {
    /// Each stream is the trunk followed by the 1x1 layers up to `fusion`; the
    /// head holds the remaining 1x1 layers and the classifier. Without depth
    /// the same layers form a plain RGB network.
    pub fn new(num_labels: usize, fusion: FusionPoint, with_depth: bool, seed: u64) -> Result<Self> {
        let before = match fusion {
            FusionPoint::Pool5 => 0,
            FusionPoint::Fc6 => 1,
            FusionPoint::Fc7 => 2,
        };
        let stream = |r: &mut ChaCha8Rng| -> Result<Sequential> {
            let mut layers = trunk(3, r)?;
            for _ in 0..before {
                layers.push(Layer::conv(TRUNK_CHANNELS, TRUNK_CHANNELS, 1, r)?);
                layers.push(Layer::relu());
            }
            Ok(Sequential::new(layers))
        };
        let rgb = stream(&mut rng(seed, 0))?;
        let depth = if with_depth { Some(stream(&mut rng(seed, 1))?) } else { None };
        let mut r = rng(seed, 2);
        let mut width = TRUNK_CHANNELS * if with_depth { 2 } else { 1 };
        let mut layers = Vec::new();
        for _ in before..2 {
            layers.push(Layer::conv(width, TRUNK_CHANNELS, 1, &mut r)?);
            layers.push(Layer::relu());
            width = TRUNK_CHANNELS;
        }
        layers.push(Layer::conv(width, num_labels, 1, &mut r)?);
        Ok(ConcatSegNet {
            fusion,
            rgb,
            depth,
            head: Sequential::new(layers),
        })
    }

    fn features(&self, sample: &SegSample) -> Result<FeatureMap> {
        let a = self.rgb.infer(&sample.image)?;
        match &self.depth {
            Some(d) => concat_features(&a, &d.infer(&sample.depth_code)?),
            None => Ok(a),
        }
    }
}

impl SegModel for ConcatSegNet {
    fn step(&mut self, sample: &SegSample, _lambda: f64, normalize: bool, lr: f64, weight_decay: f64) -> Result<[f64; 3]> {
        let [_, _, h, w] = sample.image.shape();
        let scale = loss_scale(sample, normalize);
        let a = self.rgb.forward(&sample.image)?;
        let x = match &mut self.depth {
            Some(d) => concat_features(&a, &d.forward(&sample.depth_code)?)?,
            None => a,
        };
        let m = self.head.forward(&x)?;
        let (l_color, mut g) = spatial_softmax_loss(&upscale_nearest(&m, h, w)?, &sample.labels)?;
        g.scale(scale);
        let grad_x = self.head.backward(&upscale_nearest_backward(&g, m.shape())?)?;
        match &mut self.depth {
            Some(d) => {
                let (ga, gb) = split_channels(&grad_x, TRUNK_CHANNELS)?;
                self.rgb.backward(&ga)?;
                d.backward(&gb)?;
                d.sgd_step(lr, weight_decay)?;
            }
            None => {
                self.rgb.backward(&grad_x)?;
            }
        }
        self.rgb.sgd_step(lr, weight_decay)?;
        self.head.sgd_step(lr, weight_decay)?;
        Ok([l_color * scale, 0.0, l_color * scale])
    }

    fn predict(&self, sample: &SegSample) -> Result<Vec<u8>> {
        let [_, _, h, w] = sample.image.shape();
        let m = self.head.infer(&self.features(sample)?)?;
        Ok(argmax_labels(&upscale_nearest(&m, h, w)?))
    }
}

/// Test-split IoU and per-epoch training losses of one trained network.
#[derive(Debug, Clone)]
pub struct SegOutcome {
    pub iou: SegmentationIou,
    pub telemetry: Telemetry,
}

fn fit(
    model: &mut impl SegModel,
    config: &ExperimentConfig,
    samples: &[SegSample],
    train: usize,
    lambda: f64,
) -> Result<SegOutcome> {
    if train == 0 || train >= samples.len() {
        return Err(Error::Argument(format!(
            "need train split in [1, {}), got {train}",
            samples.len()
        )));
    }
    let schedule = config.schedule();
    let mut order: Vec<usize> = (0..train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(component_seed(config.seed, "seg-order"));
    let mut telemetry = Telemetry::segmentation();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.rate(epoch);
        let mut sum = [0.0; 3];
        for &i in &order {
            let l = model.step(&samples[i], lambda, config.normalize_loss, lr, schedule.weight_decay)?;
            for k in 0..3 {
                sum[k] += l[k];
            }
        }
        telemetry.rows.push(sum.map(|s| s / train as f64));
    }
    let preds = samples[train..]
        .par_iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new(config.classes + 1);
    for (p, s) in preds.iter().zip(&samples[train..]) {
        confusion.add(p, &s.labels)?;
    }
    Ok(SegOutcome {
        iou: confusion.iou(),
        telemetry,
    })
}

fn multitask_net(
    config: &ExperimentConfig,
    samples: &[SegSample],
    train: usize,
    depth_layers: Option<usize>,
) -> Result<MultiTaskNet> {
    let seen = &samples[..train.min(samples.len())];
    let mut net = MultiTaskNet::new(config.classes + 1, depth_layers, component_seed(config.seed, "seg-net"))?;
    let (sum, count) = seen
        .iter()
        .flat_map(|s| s.log_depth.data())
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    net.set_depth_bias(sum / count.max(1) as f64);
    net.set_label_prior(&label_prior(seen, config.classes + 1));
    Ok(net)
}

/// Trains the multi-task network with depth weight `lambda` and an `n`-layer
/// depth stream on `samples[..train]` and scores the rest.
pub fn train_multitask(
    config: &ExperimentConfig,
    samples: &[SegSample],
    train: usize,
    lambda: f64,
    n: usize,
) -> Result<SegOutcome> {
    let mut net = multitask_net(config, samples, train, Some(n))?;
    fit(&mut net, config, samples, train, lambda)
}

/// The multi-task network without its depth stream.
pub fn train_rgb_only(config: &ExperimentConfig, samples: &[SegSample], train: usize) -> Result<SegOutcome> {
    let mut net = multitask_net(config, samples, train, None)?;
    fit(&mut net, config, samples, train, 0.0)
}

/// Trains the two-stream network fused at `fusion`, or the RGB stream alone when `None`.
pub fn train_concat(
    config: &ExperimentConfig,
    samples: &[SegSample],
    train: usize,
    fusion: Option<FusionPoint>,
) -> Result<SegOutcome> {
    let mut net = ConcatSegNet::new(
        config.classes + 1,
        fusion.unwrap_or(FusionPoint::Pool5),
        fusion.is_some(),
        component_seed(config.seed, "seg-net"),
    )?;
    set_last_bias(
        &mut net.head,
        &label_prior(&samples[..train.min(samples.len())], config.classes + 1),
    );
    fit(&mut net, config, samples, train, 0.0)
}

fn label_names(classes: usize) -> Vec<String> {
    std::iter::once("background".to_string())
        .chain(class_names(classes))
        .collect()
}

/// Loads the data and depth estimates; the returned config takes its class
/// count from the dataset.
fn prepare(config: &ExperimentConfig) -> Result<(ExperimentConfig, Vec<SegSample>, usize, Option<Telemetry>)> {
    let data = load_or_generate(config)?;
    let depth = estimate_depths(config, &data)?;
    let samples = prepare_samples(&data, &depth)?;
    let train = config.train_count().min(samples.len() - 1);
    let mut config = config.clone();
    config.classes = data.num_classes;
    Ok((config, samples, train, depth.telemetry()))
}

/// RGB baseline against the depth-aided network of the chosen scheme.
pub fn run_segmentation_pipeline(config: &ExperimentConfig, scheme: SegScheme) -> Result<PipelineOutput> {
    let (config, samples, train, dcnf) = prepare(config)?;
    let config = &config;
    let mut out = PipelineOutput::default();
    out.telemetry.extend(dcnf.map(|t| ("dcnf".to_string(), t)));
    let mut report = EvalReport::new("Semantic segmentation, IoU (%)", "mean IoU", label_names(config.classes));
    let (baseline, fused, label) = match scheme {
        SegScheme::Multitask => (
            train_rgb_only(config, &samples, train)?,
            (config.lambda > 0.0)
                .then(|| train_multitask(config, &samples, train, config.lambda, config.depth_layers))
                .transpose()?,
            format!("RGB-D multitask (lambda={}, n={})", config.lambda, config.depth_layers),
        ),
        SegScheme::Concat => (
            train_concat(config, &samples, train, None)?,
            Some(train_concat(config, &samples, train, Some(config.fusion))?),
            format!("RGB-D concat ({})", config.fusion),
        ),
    };
    report.push("RGB", baseline.iou.per_class, baseline.iou.mean);
    out.telemetry.push(("segment_rgb".into(), baseline.telemetry));
    if let Some(f) = fused {
        log::info!("{label}: mean IoU {:.4}", f.iou.mean);
        report.push(label, f.iou.per_class, f.iou.mean);
        out.telemetry.push(("segment_rgbd".into(), f.telemetry));
    }
    out.reports.push(("segment".into(), report));
    Ok(out)
}

/// Mean IoU of the multi-task scheme over `sweep_lambdas` x `sweep_layers`.
/// `lambda = 0` is the RGB-only network, trained once and shared by all rows.
/// Cells whose training diverges are reported as missing.
pub fn run_sweep(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let (config, samples, train, dcnf) = prepare(config)?;
    let config = &config;
    let mut out = PipelineOutput::default();
    out.telemetry.extend(dcnf.map(|t| ("dcnf".to_string(), t)));
    let layers = config.sweep_layers.clone();
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for &lambda in &config.sweep_lambdas {
        if lambda == 0.0 {
            cells.push((0.0, 0));
        } else {
            cells.extend(layers.iter().map(|&n| (lambda, n)));
        }
    }
    let scores = cells
        .par_iter()
        .map(|&(lambda, n)| {
            let outcome = if n == 0 {
                train_rgb_only(config, &samples, train)
            } else {
                train_multitask(config, &samples, train, lambda, n)
            };
            match outcome {
                Ok(o) => Ok(((lambda.to_bits(), n), Some(o.iou.mean))),
                Err(Error::Training(why)) => Ok(((lambda.to_bits(), n), None)).inspect(|_| {
                    log::warn!("lambda={lambda}, n={n} diverged: {why}");
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<std::collections::HashMap<_, _>>>()?;
    let columns: Vec<String> = config.sweep_lambdas.iter().map(|l| format!("lambda={l}")).collect();
    let mut report = EvalReport::new("Multi-task segmentation, mean IoU (%)", "best", columns);
    for &n in &layers {
        let row: Vec<Option<f64>> = config
            .sweep_lambdas
            .iter()
            .map(|&l| {
                if l == 0.0 {
                    scores[&(0f64.to_bits(), 0)]
                } else {
                    scores[&(l.to_bits(), n)]
                }
            })
            .collect();
        let best = row.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        report.push(format!("n={n}"), row, best);
    }
    out.reports.push(("sweep".into(), report));
    Ok(out)
}
