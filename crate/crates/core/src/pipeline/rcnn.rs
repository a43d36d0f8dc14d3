//! Region-based detection with depth: RGB and encoded-depth crops of each
//! proposal go through separate region networks, the two descriptors are
//! concatenated and classified by per-class SVMs trained with hard negative mining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::{RegionNet, CROP_SIZE};
use super::{
    class_names, component_seed, estimate_depths, generate_proposals, load_or_generate, Dataset, DepthStage, ExperimentConfig,
    FeatureMode, PipelineOutput, Telemetry,
};
use crate::depth_io::encode_depth;
use crate::detector::{assign_labels, hard_negative_mine, nms, DetectorModel, LabelMode, MiningParams, RegionLabel, SvmParams};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_detections, precision_recall, svg_line_plot, BBox, Detection, EvalReport, GroundTruth, DEFAULT_IOU_THRESHOLD,
};
use crate::fusion::warp_region;
use crate::netcore::FeatureMap;

/// Report rows, in order.
pub const RCNN_ROWS: [&str; 5] = ["RGB", "depth (estimated)", "RGB-D (estimated)", "depth (GT)", "RGB-D (GT)"];
const ROW_STREAMS: [&[usize]; 5] = [&[0], &[1], &[0, 1], &[2], &[0, 2]];
const STREAM_NAMES: [&str; 3] = ["rgb", "depth_est", "depth_gt"];
/// Descriptors are scaled so their mean norm over the training set is this.
const TARGET_NORM: f64 = 20.0;
const INITIAL_NEGATIVES: usize = 500;

/// Descriptor of every box of one image.
type Descriptors = Vec<Vec<f64>>;

struct Regions {
    /// Boxes per image; training images list their ground-truth boxes first.
    boxes: Vec<Vec<BBox>>,
    gts: Vec<GroundTruth>,
}

fn collect_regions(config: &ExperimentConfig, data: &Dataset, train: usize) -> Regions {
    let boxes = data
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut b: Vec<BBox> = if i < train {
                s.objects.iter().map(|o| o.bbox).collect()
            } else {
                Vec::new()
            };
            for p in generate_proposals(s, i, config.seed) {
                if !b.contains(&p) {
                    b.push(p);
                }
            }
            b
        })
        .collect();
    Regions {
        boxes,
        gts: data.ground_truths(0..data.scenes.len()),
    }
}

fn stream_inputs(stream: usize, data: &Dataset, depth: &DepthStage) -> Result<Vec<FeatureMap>> {
    data.scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| match stream {
            0 => Ok(s.image.to_feature_map()),
            1 => Ok(encode_depth(&depth.estimated[i])?.to_feature_map()),
            _ => Ok(encode_depth(&s.depth)?.to_feature_map()),
        })
        .collect()
}

/// Trains the region network of one stream and returns descriptors of every box.
fn stream_features(
    config: &ExperimentConfig,
    stream: usize,
    inputs: &[FeatureMap],
    regions: &Regions,
    train: usize,
    num_classes: usize,
) -> Result<(Vec<Descriptors>, Vec<f64>)> {
    let seed = component_seed(config.seed, STREAM_NAMES[stream]);
    let mut net = RegionNet::new(3, num_classes + 1, seed)?;
    let mut crops = Vec::new();
    let mut labels = Vec::new();
    for i in 0..train {
        let tagged: Vec<(usize, BBox)> = regions.boxes[i].iter().map(|&b| (i, b)).collect();
        for (&(_, b), l) in tagged.iter().zip(assign_labels(&tagged, &regions.gts, LabelMode::Finetune)) {
            crops.push(warp_region(&inputs[i], b, CROP_SIZE)?);
            labels.push(l.class().unwrap_or(0));
        }
    }
    let schedule = config.schedule();
    let history = match config.features {
        FeatureMode::Finetune => net.finetune(&crops, &labels, &schedule, config.epochs, seed ^ 1)?,
        FeatureMode::Frozen => net.pretrain_autoencoder(&crops, &schedule, config.epochs, seed ^ 1)?,
    };
    drop(crops);
    let features = inputs
        .par_iter()
        .zip(&regions.boxes)
        .map(|(input, boxes)| {
            if boxes.is_empty() {
                return Ok(Vec::new());
            }
            let crops = boxes
                .iter()
                .map(|&b| warp_region(input, b, CROP_SIZE))
                .collect::<Result<Vec<_>>>()?;
            net.features(&FeatureMap::stack(&crops)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((features, history))
}

fn row_vectors(streams: &[usize], features: &[Vec<Vec<Vec<f64>>>], image: usize) -> Vec<Vec<f64>> {
    let n = features[streams[0]][image].len();
    (0..n)
        .map(|j| streams.iter().flat_map(|&s| features[s][image][j].iter().copied()).collect())
        .collect()
}

fn train_detector(
    config: &ExperimentConfig,
    vectors: &[Vec<Vec<f64>>],
    regions: &Regions,
    train: usize,
    num_classes: usize,
    row: usize,
) -> Result<DetectorModel> {
    let count: usize = vectors[..train].iter().map(Vec::len).sum();
    let mean_norm = vectors[..train]
        .iter()
        .flatten()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / count.max(1) as f64;
    let scale = if mean_norm > 0.0 { TARGET_NORM / mean_norm } else { 1.0 };
    let svm = SvmParams {
        c: config.svm_c,
        bias: config.svm_b,
        positive_weight: config.svm_w1,
        tolerance: 1e-4,
        max_passes: 2000,
        seed: component_seed(config.seed, "svm"),
    };
    let classes = (1..=num_classes)
        .into_par_iter()
        .map(|k| {
            let class_gts: Vec<GroundTruth> = regions.gts.iter().filter(|g| g.class == k).copied().collect();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for i in 0..train {
                let tagged: Vec<(usize, BBox)> = regions.boxes[i].iter().map(|&b| (i, b)).collect();
                for (j, l) in assign_labels(&tagged, &class_gts, LabelMode::Svm).into_iter().enumerate() {
                    let x: Vec<f64> = vectors[i][j].iter().map(|v| v * scale).collect();
                    match l {
                        RegionLabel::Positive { .. } => positives.push(x),
                        RegionLabel::Negative => negatives.push(x),
                        RegionLabel::Ignored => {}
                    }
                }
            }
            if positives.is_empty() {
                return Err(Error::Training(format!(
                    "class {k} has no training instance; use more images or fewer classes"
                )));
            }
            let mut initial: Vec<usize> = (0..negatives.len()).collect();
            initial.shuffle(&mut ChaCha8Rng::seed_from_u64(
                component_seed(config.seed, "negatives") ^ (k as u64) ^ ((row as u64) << 8),
            ));
            initial.truncate(INITIAL_NEGATIVES);
            let pos: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
            let neg: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
            let mined = hard_negative_mine(&pos, &neg, &initial, svm, MiningParams::default())?;
            log::debug!(
                "{} class {k}: {} positives, {} of {} negatives after {} rounds",
                RCNN_ROWS[row],
                pos.len(),
                mined.working_set.len(),
                neg.len(),
                mined.rounds
            );
            Ok(mined.model)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectorModel {
        feature_scale: scale,
        classes,
    })
}

fn detect_images(
    model: &DetectorModel,
    vectors: &[Vec<Vec<f64>>],
    regions: &Regions,
    range: std::ops::Range<usize>,
    nms_threshold: f64,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for i in range {
        for (j, v) in vectors[i].iter().enumerate() {
            for (k, score) in model.scores(v).into_iter().enumerate() {
                dets.push(Detection {
                    image_id: i,
                    class: k + 1,
                    score,
                    bbox: regions.boxes[i][j],
                });
            }
        }
    }
    nms(&dets, nms_threshold)
}

fn slug(row: &str) -> String {
    row.chars()
        .filter_map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' => Some(c.to_ascii_lowercase()),
            ' ' | '-' => Some('_'),
            _ => None,
        })
        .collect()
}

/// Runs all five rows (RGB, depth and RGB-D with estimated and with true depth).
pub fn run_rcnn_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let data = load_or_generate(config)?;
    let depth = estimate_depths(config, &data)?;
    run_rcnn_on(config, &data, &depth)
}

pub(crate) fn run_rcnn_on(config: &ExperimentConfig, data: &Dataset, depth: &DepthStage) -> Result<PipelineOutput> {
    let n = data.scenes.len();
    let train = config.train_count().min(n - 1);
    let num_classes = data.num_classes;
    let regions = collect_regions(config, data, train);

    let mut out = PipelineOutput::default();
    if let Some(t) = depth.telemetry() {
        out.telemetry.push(("dcnf".into(), t));
    }

    let mut features = Vec::with_capacity(3);
    for stream in 0..3 {
        let inputs = stream_inputs(stream, data, depth)?;
        let (f, history) = stream_features(config, stream, &inputs, &regions, train, num_classes)?;
        log::info!("region net {}: loss per epoch {history:?}", STREAM_NAMES[stream]);
        let mut t = Telemetry::detection();
        t.rows = history.iter().map(|&l| [l, 0.0, l]).collect();
        out.telemetry.push((format!("rcnn_{}", STREAM_NAMES[stream]), t));
        features.push(f);
    }

    let test_gts: Vec<GroundTruth> = regions.gts.iter().filter(|g| g.image_id >= train).copied().collect();
    let mut report = EvalReport::new("R-CNN detection, AP (%)", "mAP", class_names(num_classes));
    for (row, streams) in ROW_STREAMS.iter().enumerate() {
        let vectors: Vec<Vec<Vec<f64>>> = (0..n).map(|i| row_vectors(streams, &features, i)).collect();
        let model = train_detector(config, &vectors, &regions, train, num_classes, row)?;
        let dets = detect_images(&model, &vectors, &regions, train..n, config.nms);
        let eval = evaluate_detections(&dets, &test_gts, num_classes, DEFAULT_IOU_THRESHOLD, config.ap_mode);
        log::info!("{}: mAP {:.4}", RCNN_ROWS[row], eval.map);
        if row == 2 {
            let curves: Vec<(String, Vec<(f64, f64)>)> = (1..=num_classes)
                .map(|k| {
                    (
                        format!("class{k}"),
                        precision_recall(&dets, &test_gts, k, DEFAULT_IOU_THRESHOLD),
                    )
                })
                .collect();
            out.figures.push((
                "rcnn_pr_rgbd_estimated".into(),
                svg_line_plot("RGB-D (estimated)", "recall", "precision", &curves),
            ));
        }
        report.push(RCNN_ROWS[row], eval.per_class, eval.map);
        out.detections.push((format!("rcnn_{}", slug(RCNN_ROWS[row])), dets));
    }
    out.reports.push(("rcnn".into(), report));
    Ok(out)
}
