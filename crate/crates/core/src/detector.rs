//! Region-classifier training: proposal labelling, per-class linear SVMs with
//! hard negative mining, and non-maximum suppression.
//!
//! The SVM minimizes `1/2 |w|^2 + C sum_i c_i max(0, 1 - y_i w.[x_i; B])` with
//! `c_i = w1` for positives and 1 for negatives, by dual coordinate descent.
//! The bias is the weight on a constant feature of value `B`, so it is regularized.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{iou, valid_box, BBox, Detection, GroundTruth};
use crate::netcore::{read_checkpoint, write_checkpoint, NamedTensor};

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;
pub const FINETUNE_POSITIVE_IOU: f64 = 0.5;
pub const SVM_NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: usize,
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// IoU > 0.5 with a ground truth is positive, everything else negative.
    Finetune,
    /// Only exact ground-truth boxes are positive; IoU < 0.3 negative; the rest ignored.
    Svm,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(LabelMode::Finetune),
            "svm" => Ok(LabelMode::Svm),
            other => Err(Error::Argument(format!(
                "unknown label mode {other:?} (expected finetune or svm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Positive { class: usize, gt: usize },
    Negative,
    Ignored,
}

impl RegionLabel {
    /// Class index with 0 for background; `None` when ignored.
    pub fn class(&self) -> Option<usize> {
        match *self {
            RegionLabel::Positive { class, .. } => Some(class),
            RegionLabel::Negative => Some(0),
            RegionLabel::Ignored => None,
        }
    }
}

/// Labels proposal boxes against the ground truths of the same image.
/// Positives take the class of the best-overlapping ground truth (first on ties).
pub fn assign_labels(boxes: &[(usize, BBox)], gts: &[GroundTruth], mode: LabelMode) -> Vec<RegionLabel> {
    boxes
        .iter()
        .map(|&(image_id, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if g.image_id != image_id {
                    continue;
                }
                let o = iou(&b, &g.bbox);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            let (gt, overlap) = best.unwrap_or((usize::MAX, 0.0));
            match mode {
                LabelMode::Finetune if overlap > FINETUNE_POSITIVE_IOU => RegionLabel::Positive {
                    class: gts[gt].class,
                    gt,
                },
                LabelMode::Finetune => RegionLabel::Negative,
                LabelMode::Svm if overlap >= 1.0 => RegionLabel::Positive {
                    class: gts[gt].class,
                    gt,
                },
                LabelMode::Svm if overlap < SVM_NEGATIVE_IOU => RegionLabel::Negative,
                LabelMode::Svm => RegionLabel::Ignored,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    /// Value of the constant bias feature.
    pub bias: f64,
    /// Cost factor on positive examples.
    pub positive_weight: f64,
    /// Stop when the projected-gradient spread falls below this.
    pub tolerance: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 0.001,
            bias: 10.0,
            positive_weight: 2.0,
            tolerance: 1e-6,
            max_passes: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    /// Weight on the bias feature; the offset is `bias_weight * params.bias`.
    pub bias_weight: f64,
    pub params: SvmParams,
}

impl SvmModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias_weight * self.params.bias
    }

    /// Primal objective on `(xs, ys)`.
    pub fn objective(&self, xs: &[&[f64]], ys: &[bool]) -> f64 {
        let p = &self.params;
        let reg = 0.5 * (dot(&self.weights, &self.weights) + self.bias_weight * self.bias_weight);
        let loss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let (sign, cost) = if y { (1.0, p.positive_weight) } else { (-1.0, 1.0) };
                cost * (1.0 - sign * self.score(x)).max(0.0)
            })
            .sum();
        reg + p.c * loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains one binary SVM (`true` = positive).
pub fn train_svm(xs: &[&[f64]], ys: &[bool], params: SvmParams) -> Result<SvmModel> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} features for {} labels", xs.len(), ys.len())));
    }
    if !ys.iter().any(|&y| y) || ys.iter().all(|&y| y) {
        return Err(Error::Training(
            "SVM training needs at least one positive and one negative".into(),
        ));
    }
    if params.c <= 0.0 || params.positive_weight <= 0.0 {
        return Err(Error::Argument("C and w1 must be positive".into()));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::Shape(format!("feature of length {} among length {dim}", x.len())));
    }
    if xs.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("non-finite SVM feature".into()));
    }

    let n = xs.len();
    let b = params.bias;
    let sign: Vec<f64> = ys.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = ys
        .iter()
        .map(|&y| params.c * if y { params.positive_weight } else { 1.0 })
        .collect();
    let q: Vec<f64> = xs.iter().map(|x| dot(x, x) + b * b).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let mut wb = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    for _ in 0..params.max_passes {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = sign[i] * (dot(&w, xs[i]) + wb * b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= upper[i] {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 && q[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, upper[i]);
                let step = (alpha[i] - old) * sign[i];
                if step != 0.0 {
                    for (wk, xk) in w.iter_mut().zip(xs[i]) {
                        *wk += step * xk;
                    }
                    wb += step * b;
                }
            }
        }
        if pg_max - pg_min <= params.tolerance {
            break;
        }
    }
    Ok(SvmModel {
        weights: w,
        bias_weight: wb,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningParams {
    /// A negative violates the margin when its score exceeds `-1 + epsilon`.
    pub epsilon: f64,
    /// Most violators added per round (highest scores first).
    pub batch_cap: usize,
    /// Largest allowed working set of negatives.
    pub working_set_cap: usize,
    pub max_rounds: usize,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            epsilon: 1e-3,
            batch_cap: 5000,
            working_set_cap: 200_000,
            max_rounds: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningOutcome {
    pub model: SvmModel,
    /// Indices into the negative pool that were trained on.
    pub working_set: Vec<usize>,
    /// Retraining rounds after the initial model.
    pub rounds: usize,
    /// True when a full scan found no violator outside the working set.
    pub converged: bool,
}

fn train_on(positives: &[&[f64]], negatives: &[&[f64]], working: &[usize], params: SvmParams) -> Result<SvmModel> {
    let mut xs: Vec<&[f64]> = positives.to_vec();
    xs.extend(working.iter().map(|&i| negatives[i]));
    let mut ys = vec![true; positives.len()];
    ys.resize(xs.len(), false);
    train_svm(&xs, &ys, params)
}

/// Hard negative mining from an initial negative subset `initial` of `negatives`.
pub fn hard_negative_mine(
    positives: &[&[f64]],
    negatives: &[&[f64]],
    initial: &[usize],
    svm: SvmParams,
    mining: MiningParams,
) -> Result<MiningOutcome> {
    let mut in_set = vec![false; negatives.len()];
    let mut working = Vec::with_capacity(initial.len());
    for &i in initial {
        if i >= negatives.len() {
            return Err(Error::Argument(format!(
                "initial negative {i} outside pool of {}",
                negatives.len()
            )));
        }
        if !in_set[i] {
            in_set[i] = true;
            working.push(i);
        }
    }
    let mut model = train_on(positives, negatives, &working, svm)?;
    for round in 0..=mining.max_rounds {
        let mut violators: Vec<(usize, f64)> = negatives
            .iter()
            .enumerate()
            .filter(|&(i, _)| !in_set[i])
            .map(|(i, x)| (i, model.score(x)))
            .filter(|&(_, s)| s > -1.0 + mining.epsilon)
            .collect();
        if violators.is_empty() {
            working.sort_unstable();
            return Ok(MiningOutcome {
                model,
                working_set: working,
                rounds: round,
                converged: true,
            });
        }
        if round == mining.max_rounds {
            break;
        }
        violators.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        violators.truncate(mining.batch_cap);
        if working.len() + violators.len() > mining.working_set_cap {
            return Err(Error::Capacity {
                size: working.len() + violators.len(),
                cap: mining.working_set_cap,
            });
        }
        for (i, _) in violators {
            in_set[i] = true;
            working.push(i);
        }
        log::debug!("mining round {}: working set {}", round + 1, working.len());
        model = train_on(positives, negatives, &working, svm)?;
    }
    working.sort_unstable();
    Ok(MiningOutcome {
        model,
        working_set: working,
        rounds: mining.max_rounds,
        converged: false,
    })
}

/// Greedy non-maximum suppression within each (image, class) group.
/// Score ties keep input order. Output is in descending-score order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut groups: HashMap<(usize, usize), Vec<BBox>> = HashMap::new();
    let mut kept = Vec::new();
    for i in order {
        let d = dets[i];
        let group = groups.entry((d.image_id, d.class)).or_default();
        if !group.iter().any(|b| iou(b, &d.bbox) > threshold) {
            group.push(d.bbox);
            kept.push(d);
        }
    }
    kept
}

/// One SVM per foreground class over features multiplied by `feature_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub feature_scale: f64,
    pub classes: Vec<SvmModel>,
}

const MODEL_MAGIC: &str = "depthfuse-svm";

impl DetectorModel {
    pub fn feature_dim(&self) -> usize {
        self.classes.first().map_or(0, |m| m.weights.len())
    }

    /// Scores of classes `1..=N` for an unscaled feature.
    pub fn scores(&self, feature: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = feature.iter().map(|v| v * self.feature_scale).collect();
        self.classes.iter().map(|m| m.score(&x)).collect()
    }

    /// Scores every proposal against every class, then applies NMS.
    pub fn detect(&self, proposals: &[Proposal], nms_threshold: f64) -> Vec<Detection> {
        let mut dets = Vec::new();
        for p in proposals {
            for (k, s) in self.scores(&p.feature).into_iter().enumerate() {
                dets.push(Detection {
                    image_id: p.image_id,
                    class: k + 1,
                    score: s,
                    bbox: p.bbox,
                });
            }
        }
        nms(&dets, nms_threshold)
    }

    /// Text header line, then a parameter checkpoint with one `class{k}` tensor
    /// per class holding `[w; bias_weight]`.
    pub fn save(&self, mut out: impl Write) -> Result<()> {
        let p = self.classes.first().map(|m| m.params).unwrap_or_default();
        writeln!(
            out,
            "{MODEL_MAGIC} classes={} dim={} scale={} c={} b={} w1={}",
            self.classes.len(),
            self.feature_dim(),
            self.feature_scale,
            p.c,
            p.bias,
            p.positive_weight
        )?;
        let tensors: Vec<NamedTensor> = self
            .classes
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let mut v = m.weights.clone();
                v.push(m.bias_weight);
                NamedTensor::from_values(format!("class{}", k + 1), v)
            })
            .collect();
        write_checkpoint(out, &tensors)
    }

    pub fn load(mut input: impl BufRead) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MODEL_MAGIC) {
            return Err(Error::parse(0, format!("missing `{MODEL_MAGIC}` header")));
        }
        let kv: HashMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| -> Result<f64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(0, format!("header lacks a numeric `{k}`")))
        };
        let (classes, dim) = (get("classes")? as usize, get("dim")? as usize);
        let params = SvmParams {
            c: get("c")?,
            bias: get("b")?,
            positive_weight: get("w1")?,
            ..SvmParams::default()
        };
        let feature_scale = get("scale")?;
        let tensors = read_checkpoint(input)?;
        if tensors.len() != classes {
            return Err(Error::Data(format!(
                "header promises {classes} classes, found {}",
                tensors.len()
            )));
        }
        let classes = tensors
            .into_iter()
            .map(|t| {
                if t.values.len() != dim + 1 {
                    return Err(Error::Shape(format!(
                        "{} has {} values, expected {}",
                        t.name,
                        t.values.len(),
                        dim + 1
                    )));
                }
                let mut weights = t.values;
                let bias_weight = weights.pop().unwrap_or(0.0);
                Ok(SvmModel {
                    weights,
                    bias_weight,
                    params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorModel { feature_scale, classes })
    }
}

/// Rejects proposals with degenerate boxes.
pub fn check_proposals(proposals: &[Proposal]) -> Result<()> {
    match proposals.iter().position(|p| !valid_box(&p.bbox)) {
        Some(i) => Err(Error::Data(format!(
            "proposal {i} has an invalid box {:?}",
            proposals[i].bbox
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(bbox: BBox) -> GroundTruth {
        GroundTruth {
            image_id: 0,
            class: 2,
            bbox,
        }
    }

    #[test]
    fn labels_by_mode() {
        let g = [gt([0.0, 0.0, 10.0, 10.0])];
        let boxes = [
            (0, [0.0, 0.0, 10.0, 10.0]),
            (0, [50.0, 50.0, 60.0, 60.0]),
            (0, [0.0, 0.0, 10.0, 4.0]),
        ];
        assert!((iou(&boxes[2].1, &g[0].bbox) - 0.4).abs() < 1e-15);
        let f = assign_labels(&boxes, &g, LabelMode::Finetune);
        assert_eq!(
            f,
            vec![
                RegionLabel::Positive { class: 2, gt: 0 },
                RegionLabel::Negative,
                RegionLabel::Negative
            ]
        );
        let s = assign_labels(&boxes, &g, LabelMode::Svm);
        assert_eq!(
            s,
            vec![
                RegionLabel::Positive { class: 2, gt: 0 },
                RegionLabel::Negative,
                RegionLabel::Ignored
            ]
        );
        assert!(matches!("rpn".parse::<LabelMode>(), Err(Error::Argument(_))));
    }

    #[test]
    fn other_images_do_not_count() {
        let g = [gt([0.0, 0.0, 10.0, 10.0])];
        let l = assign_labels(&[(1, [0.0, 0.0, 10.0, 10.0])], &g, LabelMode::Finetune);
        assert_eq!(l, vec![RegionLabel::Negative]);
    }

    #[test]
    fn separable_toy_set_is_fit() {
        let data: Vec<[f64; 2]> = vec![[2.0, 2.0], [3.0, 1.5], [2.5, 3.0], [-2.0, -1.0], [-1.5, -3.0], [-3.0, -2.0]];
        let xs: Vec<&[f64]> = data.iter().map(|x| &x[..]).collect();
        let ys = [true, true, true, false, false, false];
        let p = SvmParams {
            c: 10.0,
            ..Default::default()
        };
        let m = train_svm(&xs, &ys, p).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.score(x) > 0.0, y);
        }
    }

    #[test]
    fn single_class_is_a_training_error() {
        let x = [1.0];
        assert!(matches!(
            train_svm(&[&x[..]], &[true], SvmParams::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn nms_cases() {
        let d = |score, x: f64| Detection {
            image_id: 0,
            class: 1,
            score,
            bbox: [x, 0.0, x + 10.0, 10.0],
        };
        assert_eq!(nms(&[d(0.5, 0.0)], 0.5).len(), 1);
        let kept = nms(&[d(0.4, 0.0), d(0.9, 0.0)], 0.5);
        assert_eq!(kept, vec![d(0.9, 0.0)]);
        // A-B and B-C overlap 0.6, A-C 0.1 (1D widths chosen to hit these ratios)
        let a = Detection {
            image_id: 0,
            class: 1,
            score: 0.9,
            bbox: [0.0, 0.0, 16.0, 1.0],
        };
        let b = Detection {
            score: 0.8,
            bbox: [4.0, 0.0, 20.0, 1.0],
            ..a
        };
        let c = Detection {
            score: 0.7,
            bbox: [8.0, 0.0, 24.0, 1.0],
            ..a
        };
        assert!((iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&b.bbox, &c.bbox) - 0.6).abs() < 1e-12);
        let ac = iou(&a.bbox, &c.bbox);
        assert!(ac < 0.5);
        assert_eq!(nms(&[a, b, c], 0.5), vec![a, c]);
    }

    #[test]
    fn model_file_round_trip() {
        let params = SvmParams::default();
        let m = DetectorModel {
            feature_scale: 0.25,
            classes: vec![
                SvmModel {
                    weights: vec![1.0, -2.0],
                    bias_weight: 0.5,
                    params,
                },
                SvmModel {
                    weights: vec![0.0, 3.5],
                    bias_weight: -1.0,
                    params,
                },
            ],
        };
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        assert!(buf.starts_with(b"depthfuse-svm classes=2 dim=2 scale=0.25 c=0.001 b=10 w1=2\n"));
        assert_eq!(DetectorModel::load(buf.as_slice()).unwrap(), m);
    }
}
