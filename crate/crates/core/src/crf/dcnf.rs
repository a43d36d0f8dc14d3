//! Deep convolutional neural field: a small convnet regresses per-superpixel
//! log depth, the CRF couples neighbours through learned `beta`, and both are
//! trained jointly by minimizing the exact negative log-likelihood.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CrfInstance, NllGradients};
use crate::depth_io::{DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::netcore::{read_checkpoint, write_checkpoint, FeatureMap, Layer, LrSchedule, NamedTensor, Sequential};
use crate::superpixel::{build_graph, superpixel_pool, PoolAggregator, SegmentationMode, SuperpixelGraph};

/// Spatial stride of the front end (one 2x2 max-pool).
pub const FRONT_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct DcnfArch {
    pub conv_channels: [usize; 3],
    pub hidden: usize,
    pub aggregator: PoolAggregator,
    pub superpixels: usize,
    pub gamma: f64,
    pub segmentation: SegmentationMode,
}

impl Default for DcnfArch {
    fn default() -> Self {
        DcnfArch {
            conv_channels: [8, 8, 16],
            hidden: 16,
            aggregator: PoolAggregator::Mean,
            superpixels: crate::superpixel::DEFAULT_SUPERPIXELS,
            gamma: crate::superpixel::DEFAULT_GAMMA,
            segmentation: SegmentationMode::slic(),
        }
    }
}

impl DcnfArch {
    fn header(&self) -> String {
        let [a, b, c] = self.conv_channels;
        let pool = match self.aggregator {
            PoolAggregator::Mean => "mean",
            PoolAggregator::Max => "max",
        };
        let seg = match self.segmentation {
            SegmentationMode::Grid => "grid".to_string(),
            SegmentationMode::Slic { compactness, iterations } => format!("slic:{compactness}:{iterations}"),
        };
        format!(
            "depthfuse-dcnf conv={a},{b},{c} hidden={} pool={pool} superpixels={} gamma={} segmentation={seg}",
            self.hidden, self.superpixels, self.gamma
        )
    }

    fn parse_header(line: &str) -> Result<Self> {
        let bad = |m: String| Error::parse(0, m);
        let mut fields = line.split_whitespace();
        if fields.next() != Some("depthfuse-dcnf") {
            return Err(bad("missing depthfuse-dcnf header".into()));
        }
        let mut arch = DcnfArch::default();
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed field {field:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad number in {field:?}")));
            match key {
                "conv" => {
                    let parts: Vec<usize> = value.split(',').map(num).collect::<Result<_>>()?;
                    arch.conv_channels = parts.try_into().map_err(|_| bad("conv needs three channel counts".into()))?;
                }
                "hidden" => arch.hidden = num(value)?,
                "superpixels" => arch.superpixels = num(value)?,
                "gamma" => arch.gamma = value.parse().map_err(|_| bad(format!("bad gamma {value:?}")))?,
                "pool" => {
                    arch.aggregator = match value {
                        "mean" => PoolAggregator::Mean,
                        "max" => PoolAggregator::Max,
                        _ => return Err(bad(format!("unknown pool {value:?}"))),
                    }
                }
                "segmentation" => {
                    arch.segmentation = if value == "grid" {
                        SegmentationMode::Grid
                    } else {
                        let parts: Vec<&str> = value.split(':').collect();
                        match parts.as_slice() {
                            ["slic", c, i] => SegmentationMode::Slic {
                                compactness: c.parse().map_err(|_| bad("bad compactness".into()))?,
                                iterations: num(i)?,
                            },
                            _ => return Err(bad(format!("unknown segmentation {value:?}"))),
                        }
                    }
                }
                _ => return Err(bad(format!("unknown field {key:?}"))),
            }
        }
        Ok(arch)
    }
}

/// One training image with its graph and ground-truth centroid log depths.
#[derive(Debug, Clone)]
pub struct DcnfSample {
    pub image: RgbImage,
    pub graph: SuperpixelGraph,
    pub y_gt: Vec<f64>,
}

/// Log depth at each superpixel's centroid pixel. Falls back to the mean log
/// depth of valid members when the centroid pixel lies outside the superpixel
/// or is invalid.
pub fn centroid_log_depths(graph: &SuperpixelGraph, depth: &DepthMap) -> Result<Vec<f64>> {
    if depth.height != graph.height || depth.width != graph.width {
        return Err(Error::Shape("depth map and graph disagree in size".into()));
    }
    graph
        .nodes
        .iter()
        .map(|node| {
            let (r, c) = (node.centroid.0.round() as usize, node.centroid.1.round() as usize);
            if graph.label(r, c) == node.id {
                if let Some(d) = depth.get(r, c) {
                    return Ok(d.ln());
                }
            }
            let logs: Vec<f64> = node
                .pixels
                .iter()
                .filter_map(|&(r, c)| depth.get(r, c))
                .map(f64::ln)
                .collect();
            if logs.is_empty() {
                return Err(Error::Data(format!("superpixel {} has no valid depth", node.id)));
            }
            Ok(logs.iter().sum::<f64>() / logs.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DcnfModel {
    pub arch: DcnfArch,
    pub front: Sequential,
    pub head: Sequential,
    pub beta: [f64; 3],
}

/// Result of depth prediction on one image.
#[derive(Debug, Clone)]
pub struct DepthPrediction {
    pub depth: DepthMap,
    pub graph: SuperpixelGraph,
    pub z: Vec<f64>,
    pub y_star: Vec<f64>,
}

impl DcnfModel {
    pub fn new(arch: DcnfArch, beta: [f64; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = arch.conv_channels;
        let front = Sequential::new(vec![
            Layer::conv(3, c1, 3, &mut rng)?,
            Layer::relu(),
            Layer::max_pool(2, FRONT_STRIDE)?,
            Layer::conv(c1, c2, 3, &mut rng)?,
            Layer::relu(),
            Layer::conv(c2, c3, 3, &mut rng)?,
            Layer::relu(),
        ]);
        let head = Sequential::new(vec![
            Layer::linear(c3, arch.hidden, &mut rng)?,
            Layer::relu(),
            Layer::linear(arch.hidden, 1, &mut rng)?,
        ]);
        let model = DcnfModel { arch, front, head, beta };
        super::check_beta(&model.beta)?;
        Ok(model)
    }

    /// Sets the regressor's output bias, e.g. to the mean training log depth.
    pub fn set_output_bias(&mut self, value: f64) {
        if let Some(Layer::Linear(l)) = self.head.layers.last_mut() {
            l.params.bias.value[0] = value;
        }
    }

    pub fn graph_for(&self, image: &RgbImage) -> Result<SuperpixelGraph> {
        let target = self.arch.superpixels.min(image.pixel_count());
        build_graph(image, target, self.arch.segmentation, self.arch.gamma)
    }

    pub fn sample(&self, image: RgbImage, depth: &DepthMap) -> Result<DcnfSample> {
        let graph = self.graph_for(&image)?;
        let y_gt = centroid_log_depths(&graph, depth)?;
        Ok(DcnfSample { image, graph, y_gt })
    }

    /// Per-superpixel regressed log depth (pure).
    pub fn unary(&self, image: &RgbImage, graph: &SuperpixelGraph) -> Result<Vec<f64>> {
        let features = self.front.infer(&image.to_feature_map())?;
        let (pooled, _) = superpixel_pool(&features, graph, FRONT_STRIDE, self.arch.aggregator)?;
        Ok(self.head.infer(&pooled)?.into_vec())
    }

    /// Forward + backward of the per-node mean likelihood on one sample. Network
    /// gradients are accumulated; the returned gradients are already divided by
    /// the node count.
    pub fn loss_and_backward(&mut self, sample: &DcnfSample) -> Result<NllGradients> {
        let features = self.front.forward(&sample.image.to_feature_map())?;
        let (pooled, routing) = superpixel_pool(&features, &sample.graph, FRONT_STRIDE, self.arch.aggregator)?;
        let z = self.head.forward(&pooled)?.into_vec();
        let inst = CrfInstance::from_graph(&sample.graph, z, self.beta)?.with_ground_truth(sample.y_gt.clone())?;
        let mut grads = inst.nll_grads()?;
        let n = sample.graph.node_count() as f64;
        grads.nll /= n;
        grads.d_z.iter_mut().for_each(|g| *g /= n);
        grads.d_beta.iter_mut().for_each(|g| *g /= n);
        let dz = FeatureMap::from_vec([grads.d_z.len(), 1, 1, 1], grads.d_z.clone())?;
        let d_pooled = self.head.backward(&dz)?;
        let d_features = routing.backward(&d_pooled)?;
        self.front.backward(&d_features)?;
        Ok(grads)
    }

    pub fn zero_grad(&mut self) {
        self.front.zero_grad();
        self.head.zero_grad();
    }

    /// Mean per-node likelihood over samples, without touching gradients.
    pub fn mean_nll(&self, samples: &[DcnfSample]) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let z = self.unary(&s.image, &s.graph)?;
            let inst = CrfInstance::from_graph(&s.graph, z, self.beta)?.with_ground_truth(s.y_gt.clone())?;
            total += inst.nll()? / s.graph.node_count() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    pub fn predict_with_graph(&self, image: &RgbImage, graph: SuperpixelGraph) -> Result<DepthPrediction> {
        let z = self.unary(image, &graph)?;
        let solution = CrfInstance::from_graph(&graph, z.clone(), self.beta)?.map_inference()?;
        let mut values = vec![0.0; image.pixel_count()];
        for (v, &label) in values.iter_mut().zip(&graph.labels) {
            *v = solution.y_star[label].exp();
        }
        Ok(DepthPrediction {
            depth: DepthMap::new(image.height, image.width, values)?,
            graph,
            z,
            y_star: solution.y_star,
        })
    }

    pub fn predict(&self, image: &RgbImage) -> Result<DepthPrediction> {
        let graph = self.graph_for(image)?;
        self.predict_with_graph(image, graph)
    }

    pub fn save(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.arch.header())?;
        let mut tensors = self.front.export("front");
        tensors.extend(self.head.export("head"));
        tensors.push(NamedTensor::from_values("crf.beta", self.beta.to_vec()));
        write_checkpoint(out, &tensors)
    }

    pub fn load(mut input: impl BufRead) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let arch = DcnfArch::parse_header(header.trim_end())?;
        let tensors: HashMap<String, NamedTensor> = read_checkpoint(input)?.into_iter().map(|t| (t.name.clone(), t)).collect();
        let beta = tensors
            .get("crf.beta")
            .filter(|t| t.values.len() == 3)
            .map(|t| [t.values[0], t.values[1], t.values[2]])
            .ok_or_else(|| Error::Data("model file lacks crf.beta".into()))?;
        let mut model = DcnfModel::new(arch, beta, 0)?;
        model.front.import("front", &tensors)?;
        model.head.import("head", &tensors)?;
        Ok(model)
    }
}

/// Predicted depth map for an image: MAP node depths scattered to their pixels.
pub fn predict_depth(image: &RgbImage, model: &DcnfModel) -> Result<DepthMap> {
    Ok(model.predict(image)?.depth)
}

#[derive(Debug, Clone)]
pub struct DcnfTraining {
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Step size for `beta`, decayed on the same schedule as the network.
    pub beta_learning_rate: f64,
    pub freeze_beta: bool,
    /// Abort after this many consecutive epochs of rising training likelihood.
    pub divergence_patience: usize,
    pub shuffle_seed: u64,
}

impl Default for DcnfTraining {
    fn default() -> Self {
        DcnfTraining {
            epochs: 15,
            schedule: LrSchedule {
                base: 0.02,
                ..LrSchedule::default()
            },
            beta_learning_rate: 0.5,
            freeze_beta: false,
            divergence_patience: 5,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnfReport {
    /// Mean per-node likelihood over each epoch's updates.
    pub epoch_nll: Vec<f64>,
    pub beta_history: Vec<[f64; 3]>,
}

/// Stochastic gradient descent on the CRF likelihood, one image per step.
/// `beta` is projected back onto the non-negative orthant after every step.
pub fn train_dcnf(samples: &[DcnfSample], model: &mut DcnfModel, training: &DcnfTraining) -> Result<DcnfReport> {
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(training.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = DcnfReport {
        epoch_nll: Vec::new(),
        beta_history: Vec::new(),
    };
    let mut rising = 0;
    model.zero_grad();
    for epoch in 0..training.epochs {
        order.shuffle(&mut rng);
        let lr = training.schedule.rate(epoch);
        let beta_lr = training.beta_learning_rate * lr / training.schedule.base;
        let mut total = 0.0;
        for &i in &order {
            let grads = model.loss_and_backward(&samples[i])?;
            if !grads.nll.is_finite() {
                return Err(Error::Training(format!(
                    "likelihood became non-finite at epoch {epoch}; history {:?}",
                    report.epoch_nll
                )));
            }
            total += grads.nll;
            model.front.sgd_step(lr, training.schedule.weight_decay)?;
            model.head.sgd_step(lr, training.schedule.weight_decay)?;
            if !training.freeze_beta {
                for k in 0..3 {
                    model.beta[k] = (model.beta[k] - beta_lr * grads.d_beta[k]).max(0.0);
                }
            }
        }
        let mean = total / samples.len() as f64;
        log::info!("dcnf epoch {epoch}: nll/node {mean:.5} beta {:?}", model.beta);
        if report.epoch_nll.last().is_some_and(|&prev| mean > prev) {
            rising += 1;
        } else {
            rising = 0;
        }
        report.epoch_nll.push(mean);
        report.beta_history.push(model.beta);
        if rising >= training.divergence_patience {
            return Err(Error::Training(format!(
                "likelihood rose {rising} epochs in a row; per-epoch nll {:?}",
                report.epoch_nll
            )));
        }
    }
    Ok(report)
}
