//! Single-stage detection: convolutional features of the whole image (and of
//! its encoded depth), RoI pooling per proposal, and a shared head with class
//! and box-regression outputs trained on the joint detection loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    class_names, component_seed, estimate_depths, generate_proposals, load_or_generate, ExperimentConfig, PipelineOutput,
    Telemetry,
};
use crate::depth_io::encode_depth;
use crate::detector::{assign_labels, nms, LabelMode, RegionLabel};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, BBox, Detection, EvalReport, GroundTruth, DEFAULT_IOU_THRESHOLD};
use crate::fusion::{
    concat_features, decode_box, detection_loss_with_grad, encode_box, roi_pool, softmax, split_channels, LossBundle, RoiBox,
    RoiPoolCache,
};
use crate::netcore::{FeatureMap, Layer, Sequential};

const STREAM_CHANNELS: usize = 16;
const STRIDE: usize = 2;
const POOL: usize = 4;
const HIDDEN: usize = 64;

/// A training RoI: its box, class (0 for background) and regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub bbox: BBox,
    pub class: usize,
    pub target: [f64; 4],
}

/// Draws up to `count` RoIs from `candidates`, at most `fg_fraction` of them
/// foreground (IoU > 0.5 with a ground-truth box), the rest background.
pub fn sample_rois(
    candidates: &[BBox],
    gts: &[GroundTruth],
    image_id: usize,
    count: usize,
    fg_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<RoiSample> {
    let tagged: Vec<(usize, BBox)> = candidates.iter().map(|&b| (image_id, b)).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&b, label) in candidates.iter().zip(assign_labels(&tagged, gts, LabelMode::Finetune)) {
        match label {
            RegionLabel::Positive { class, gt } => fg.push(RoiSample {
                bbox: b,
                class,
                target: encode_box(b, gts[gt].bbox),
            }),
            _ => bg.push(RoiSample {
                bbox: b,
                class: 0,
                target: [0.0; 4],
            }),
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(((count as f64) * fg_fraction).round() as usize);
    bg.truncate(count - fg.len());
    fg.extend(bg);
    fg
}

fn stream(rng: &mut ChaCha8Rng) -> Result<Sequential> {
    Ok(Sequential::new(vec![
        Layer::conv(3, 8, 3, rng)?,
        Layer::relu(),
        Layer::max_pool(2, 2)?,
        Layer::conv(8, STREAM_CHANNELS, 3, rng)?,
        Layer::relu(),
    ]))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone)]
pub struct FastRcnnNet {
    pub num_classes: usize,
    pub rgb: Sequential,
    /// Stream over the encoded depth image, when depth is used.
    pub depth: Option<Sequential>,
    /// Pooled RoI features to the shared hidden layer.
    pub head: Sequential,
    /// Class logits, background first.
    pub cls: Sequential,
    /// Four box offsets per class, background included.
    pub bbox: Sequential,
}

impl FastRcnnNet {
    pub fn new(num_classes: usize, with_depth: bool, seed: u64) -> Result<Self> {
        let streams = if with_depth { 2 } else { 1 };
        let mut r = rng(seed, 2);
        Ok(FastRcnnNet {
            num_classes,
            rgb: stream(&mut rng(seed, 0))?,
            depth: if with_depth { Some(stream(&mut rng(seed, 1))?) } else { None },
            head: Sequential::new(vec![
                Layer::linear(STREAM_CHANNELS * streams * POOL * POOL, HIDDEN, &mut r)?,
                Layer::relu(),
            ]),
            cls: Sequential::new(vec![Layer::linear(HIDDEN, num_classes + 1, &mut r)?]),
            bbox: Sequential::new(vec![Layer::linear(HIDDEN, 4 * (num_classes + 1), &mut r)?]),
        })
    }

    fn check_depth(&self, depth: Option<&FeatureMap>) -> Result<()> {
        if self.depth.is_some() != depth.is_some() {
            return Err(Error::Argument(
                "depth input must be given exactly when the net has a depth stream".into(),
            ));
        }
        Ok(())
    }

    fn pooled(maps: &[&FeatureMap], boxes: &[BBox]) -> Result<(FeatureMap, Vec<Vec<RoiPoolCache>>)> {
        let [_, _, fh, fw] = maps[0].shape();
        let mut items = Vec::with_capacity(boxes.len());
        let mut caches = vec![Vec::with_capacity(boxes.len()); maps.len()];
        for &b in boxes {
            let roi = RoiBox::from_pixels(0, b, STRIDE, fh, fw);
            let mut joined: Option<FeatureMap> = None;
            for (s, m) in maps.iter().enumerate() {
                let (p, cache) = roi_pool(m, &roi, POOL, POOL)?;
                caches[s].push(cache);
                joined = Some(match joined {
                    None => p,
                    Some(j) => concat_features(&j, &p)?,
                });
            }
            items.push(joined.expect("at least one stream"));
        }
        Ok((FeatureMap::stack(&items)?, caches))
    }

    /// Forward and backward pass over the RoIs of one image. Gradients of the
    /// mean per-RoI loss are left in the parameters; call [`Self::sgd_step`] to apply them.
    pub fn accumulate_gradients(
        &mut self,
        image: &FeatureMap,
        depth: Option<&FeatureMap>,
        rois: &[RoiSample],
        lambda_det: f64,
    ) -> Result<LossBundle> {
        self.check_depth(depth)?;
        if rois.is_empty() {
            return Err(Error::Argument("no RoIs to train on".into()));
        }
        let fa = self.rgb.forward(image)?;
        let fb = match (&mut self.depth, depth) {
            (Some(s), Some(d)) => Some(s.forward(d)?),
            _ => None,
        };
        let maps: Vec<&FeatureMap> = std::iter::once(&fa).chain(fb.as_ref()).collect();
        let boxes: Vec<BBox> = rois.iter().map(|r| r.bbox).collect();
        let (x, caches) = Self::pooled(&maps, &boxes)?;
        let hidden = self.head.forward(&x)?;
        let logits = self.cls.forward(&hidden)?;
        let offsets = self.bbox.forward(&hidden)?;

        let n = rois.len() as f64;
        let classes = self.num_classes + 1;
        let mut d_logits = FeatureMap::zeros(logits.shape());
        let mut d_offsets = FeatureMap::zeros(offsets.shape());
        let mut total = LossBundle::detection(0.0, 0.0, lambda_det);
        for (i, roi) in rois.iter().enumerate() {
            let row = &offsets.item(i)[4 * roi.class..4 * roi.class + 4];
            let t = [row[0], row[1], row[2], row[3]];
            let (loss, dl, dt) = detection_loss_with_grad(logits.item(i), roi.class, &t, &roi.target, lambda_det)?;
            total.accumulate(&loss);
            for (k, g) in dl.into_iter().enumerate() {
                d_logits.data_mut()[i * classes + k] = g / n;
            }
            for k in 0..4 {
                d_offsets.data_mut()[i * 4 * classes + 4 * roi.class + k] = dt[k] / n;
            }
        }
        let mut d_hidden = self.cls.backward(&d_logits)?;
        d_hidden.add_assign(&self.bbox.backward(&d_offsets)?)?;
        let d_x = self.head.backward(&d_hidden)?;

        let mut grads: Vec<FeatureMap> = maps.iter().map(|m| FeatureMap::zeros(m.shape())).collect();
        for i in 0..rois.len() {
            let item = d_x.items(i, i + 1);
            if grads.len() == 2 {
                let (ga, gb) = split_channels(&item, STREAM_CHANNELS)?;
                caches[0][i].accumulate(&ga, &mut grads[0]);
                caches[1][i].accumulate(&gb, &mut grads[1]);
            } else {
                caches[0][i].accumulate(&item, &mut grads[0]);
            }
        }
        self.rgb.backward(&grads[0])?;
        if let Some(s) = &mut self.depth {
            s.backward(&grads[1])?;
        }
        Ok(LossBundle {
            l_cls: total.l_cls / n,
            l_loc: total.l_loc / n,
            total: total.total / n,
            lambda: lambda_det,
            ..total
        })
    }

    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64) -> Result<()> {
        self.rgb.sgd_step(lr, weight_decay)?;
        if let Some(s) = &mut self.depth {
            s.sgd_step(lr, weight_decay)?;
        }
        self.head.sgd_step(lr, weight_decay)?;
        self.cls.sgd_step(lr, weight_decay)?;
        self.bbox.sgd_step(lr, weight_decay)
    }

    /// Class probabilities and per-class box offsets of each proposal.
    pub fn infer(
        &self,
        image: &FeatureMap,
        depth: Option<&FeatureMap>,
        proposals: &[BBox],
    ) -> Result<(Vec<Vec<f64>>, FeatureMap)> {
        self.check_depth(depth)?;
        let fa = self.rgb.infer(image)?;
        let fb = match (&self.depth, depth) {
            (Some(s), Some(d)) => Some(s.infer(d)?),
            _ => None,
        };
        let maps: Vec<&FeatureMap> = std::iter::once(&fa).chain(fb.as_ref()).collect();
        let (x, _) = Self::pooled(&maps, proposals)?;
        let hidden = self.head.infer(&x)?;
        let logits = self.cls.infer(&hidden)?;
        let probs = (0..proposals.len()).map(|i| softmax(logits.item(i))).collect();
        Ok((probs, self.bbox.infer(&hidden)?))
    }

    /// Scored, regressed boxes for every foreground class (before NMS).
    pub fn detect(
        &self,
        image: &FeatureMap,
        depth: Option<&FeatureMap>,
        proposals: &[BBox],
        image_id: usize,
    ) -> Result<Vec<Detection>> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let [_, _, h, w] = image.shape();
        let (probs, offsets) = self.infer(image, depth, proposals)?;
        let mut dets = Vec::new();
        for (i, (&b, p)) in proposals.iter().zip(&probs).enumerate() {
            for k in 1..=self.num_classes {
                let o = &offsets.item(i)[4 * k..4 * k + 4];
                let d = decode_box(b, [o[0], o[1], o[2], o[3]]);
                let clipped = [d[0].max(0.0), d[1].max(0.0), d[2].min(w as f64), d[3].min(h as f64)];
                let bbox = if clipped[2] > clipped[0] && clipped[3] > clipped[1] {
                    clipped
                } else {
                    b
                };
                dets.push(Detection {
                    image_id,
                    class: k,
                    score: p[k],
                    bbox,
                });
            }
        }
        Ok(dets)
    }
}

/// Trains and evaluates the RGB and the RGB-D (estimated depth) detectors.
pub fn run_fast_rcnn_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let data = load_or_generate(config)?;
    let depth = estimate_depths(config, &data)?;
    let n = data.scenes.len();
    let train = config.train_count().min(n - 1);
    let num_classes = data.num_classes;
    let gts = data.ground_truths(0..n);
    let images: Vec<FeatureMap> = data.scenes.iter().map(|s| s.image.to_feature_map()).collect();
    let codes = depth
        .estimated
        .par_iter()
        .map(|d| Ok(encode_depth(d)?.to_feature_map()))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<Vec<BBox>> = data
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

    let mut out = PipelineOutput::default();
    out.telemetry.extend(depth.telemetry().map(|t| ("dcnf".to_string(), t)));
    let test_gts: Vec<GroundTruth> = gts.iter().filter(|g| g.image_id >= train).copied().collect();
    let mut report = EvalReport::new("Fast R-CNN detection, AP (%)", "mAP", class_names(num_classes));
    let schedule = config.schedule();
    for (label, with_depth) in [("RGB", false), ("RGB-D (estimated)", true)] {
        let mut net = FastRcnnNet::new(num_classes, with_depth, component_seed(config.seed, "fast-rcnn"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(component_seed(config.seed, "fast-rcnn-rois"));
        let mut order: Vec<usize> = (0..train).collect();
        let mut telemetry = Telemetry::detection();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let lr = schedule.rate(epoch);
            let mut sum = LossBundle::detection(0.0, 0.0, config.lambda_det);
            for &i in &order {
                let rois = sample_rois(&candidates[i], &gts, i, config.rois_per_image, config.fg_fraction, &mut rng);
                let d = with_depth.then(|| &codes[i]);
                sum.accumulate(&net.accumulate_gradients(&images[i], d, &rois, config.lambda_det)?);
                net.sgd_step(lr, schedule.weight_decay)?;
            }
            let m = train as f64;
            telemetry.rows.push([sum.l_cls / m, sum.l_loc / m, sum.total / m]);
        }
        let dets = (train..n)
            .into_par_iter()
            .map(|i| net.detect(&images[i], with_depth.then(|| &codes[i]), &candidates[i], i))
            .collect::<Result<Vec<_>>>()?;
        let dets = nms(&dets.concat(), config.nms);
        let eval = evaluate_detections(&dets, &test_gts, num_classes, DEFAULT_IOU_THRESHOLD, config.ap_mode);
        log::info!("fast r-cnn {label}: mAP {:.4}", eval.map);
        report.push(label, eval.per_class, eval.map);
        let slug = if with_depth { "rgbd" } else { "rgb" };
        out.telemetry.push((format!("fast_rcnn_{slug}"), telemetry));
        out.detections.push((format!("fast_rcnn_{slug}"), dets));
    }
    out.reports.push(("fast_rcnn".into(), report));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(class: usize, bbox: BBox) -> GroundTruth {
        GroundTruth {
            image_id: 0,
            class,
            bbox,
        }
    }

    #[test]
    fn roi_sampling_respects_fraction() {
        let gts = [gt(1, [0.0, 0.0, 10.0, 10.0])];
        let mut cands = vec![[0.0, 0.0, 10.0, 10.0], [1.0, 0.0, 10.0, 10.0], [0.0, 1.0, 10.0, 10.0]];
        cands.extend((0..20).map(|i| [20.0, i as f64, 30.0, i as f64 + 5.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rois = sample_rois(&cands, &gts, 0, 8, 0.25, &mut rng);
        assert_eq!(rois.len(), 8);
        assert_eq!(rois.iter().filter(|r| r.class == 1).count(), 2);
        let exact = sample_rois(&cands[..1], &gts, 0, 8, 0.25, &mut rng);
        assert_eq!(exact[0].target, [0.0; 4]);
    }

    #[test]
    fn depth_input_must_match_streams() {
        let net = FastRcnnNet::new(2, true, 0).unwrap();
        let img = FeatureMap::zeros([1, 3, 8, 8]);
        assert!(net.infer(&img, None, &[[0.0, 0.0, 4.0, 4.0]]).is_err());
        let (p, o) = net.infer(&img, Some(&img), &[[0.0, 0.0, 4.0, 4.0]]).unwrap();
        assert_eq!(p[0].len(), 3);
        assert_eq!(o.item_len(), 12);
    }
}
