//! Detection and segmentation metrics, and report tables.
//!
//! A detection is correct when its IoU with an unmatched ground-truth box of the
//! same image and class is strictly greater than the threshold (0.5 by default).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::depth_io::IGNORE_LABEL;
use crate::error::{Error, Result};

/// Box as `(x1, y1, x2, y2)` in continuous pixel coordinates.
pub type BBox = [f64; 4];

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class: usize,
    pub bbox: BBox,
}

pub fn box_area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn valid_box(b: &BBox) -> bool {
    b.iter().all(|v| v.is_finite()) && b[2] > b[0] && b[3] > b[1]
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Indices of `dets` by descending score; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// True-positive flags of the detections of one class in descending-score order,
/// and the number of ground truths of that class.
fn match_class(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> (Vec<bool>, usize) {
    let class_dets: Vec<Detection> = dets.iter().filter(|d| d.class == class).copied().collect();
    let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    let mut matched = vec![false; class_gts.len()];
    let mut flags = Vec::with_capacity(class_dets.len());
    for i in score_order(&class_dets) {
        let d = &class_dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in class_gts.iter().enumerate() {
            if matched[j] || g.image_id != d.image_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o > threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            matched[j] = true;
        }
        flags.push(best.is_some());
    }
    (flags, class_gts.len())
}

/// `(recall, precision)` after each detection of `class`, by descending score.
pub fn precision_recall(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Vec<(f64, f64)> {
    let (flags, positives) = match_class(dets, gts, class, threshold);
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Average precision of one class, or `None` when the class has no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64, mode: ApMode) -> Option<f64> {
    if !gts.iter().any(|g| g.class == class) {
        return None;
    }
    let curve = precision_recall(dets, gts, class, threshold);
    let ap = match mode {
        ApMode::AllPoint => {
            // precision envelope, integrated over recall steps
            let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
            for k in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[k] = envelope[k].max(envelope[k + 1]);
            }
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for (&(r, _), &p) in curve.iter().zip(&envelope) {
                ap += (r - prev_recall) * p;
                prev_recall = r;
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|&&(r, _)| r >= t - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEval {
    /// `None` for classes without ground truth; those are left out of the mean.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// AP for classes `1..=num_classes` (class 0 is background and never scored).
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    threshold: f64,
    mode: ApMode,
) -> DetectionEval {
    let per_class: Vec<Option<f64>> = (1..=num_classes)
        .map(|c| average_precision(dets, gts, c, threshold, mode))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    DetectionEval { per_class, map }
}

/// Pixel confusion counts, `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationIou {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Adds one image; pixels whose ground truth is [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::Data(format!(
                    "pixel {i}: label pred={p} gt={g} outside [0, {})",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn iou(&self) -> SegmentationIou {
        let k = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..k).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.count(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        SegmentationIou { per_class, mean }
    }
}

pub fn segmentation_iou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<SegmentationIou> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.add(pred, gt)?;
    Ok(m.iou())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// A table with one column per class plus the mean (`mAP` or `mean IoU`).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub title: String,
    pub metric: String,
    pub classes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl EvalReport {
    pub fn new(title: impl Into<String>, metric: impl Into<String>, classes: Vec<String>) -> Self {
        EvalReport {
            title: title.into(),
            metric: metric.into(),
            classes,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, per_class: Vec<Option<f64>>, mean: f64) {
        self.rows.push(ReportRow {
            label: label.into(),
            per_class,
            mean,
        });
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Values are percentages with two decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n| method |", self.title);
        for c in &self.classes {
            let _ = write!(s, " {c} |");
        }
        let _ = writeln!(s, " {} |", self.metric);
        s.push_str("|---|");
        s.push_str(&"---:|".repeat(self.classes.len() + 1));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.label);
            for v in &r.per_class {
                let _ = write!(s, " {} |", cell(*v));
            }
            let _ = writeln!(s, " {} |", cell(Some(r.mean)));
        }
        s
    }

    /// Raw fractions with full precision; empty cells for undefined values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        let _ = writeln!(s, ",{}", self.metric);
        for r in &self.rows {
            s.push_str(&r.label);
            for v in &r.per_class {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v}");
                }
            }
            let _ = writeln!(s, ",{}", r.mean);
        }
        s
    }
}

const DETECTIONS_HEADER: &str = "image_id,class,score,x1,y1,x2,y2";

pub fn write_detections(mut out: impl Write, dets: &[Detection]) -> Result<()> {
    writeln!(out, "{DETECTIONS_HEADER}")?;
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox;
        writeln!(out, "{},{},{},{x1},{y1},{x2},{y2}", d.image_id, d.class, d.score)?;
    }
    Ok(())
}

/// Reads detections CSV; the header line is optional.
pub fn read_detections(input: impl BufRead) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    let mut offset = 0;
    for line in input.lines() {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        let t = line.trim();
        if t.is_empty() || t == DETECTIONS_HEADER {
            continue;
        }
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::parse(start, format!("expected 7 fields, found {}", f.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(start, format!("bad integer {s:?}")))
        };
        let real = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(start, format!("bad number {s:?}")));
        let d = Detection {
            image_id: int(f[0])?,
            class: int(f[1])?,
            score: real(f[2])?,
            bbox: [real(f[3])?, real(f[4])?, real(f[5])?, real(f[6])?],
        };
        if !d.score.is_finite() || !valid_box(&d.bbox) {
            return Err(Error::parse(start, "detection needs a finite score and x2>x1, y2>y1"));
        }
        dets.push(d);
    }
    Ok(dets)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal SVG line chart, e.g. precision/recall curves or loss curves.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (xs, ys) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let px = |x: f64| m + (x - x0) / xs * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / ys * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\">{title}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label} [{x0:.3}, {x1:.3}]</text>\n\
         <text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">{y_label} [{y0:.3}, {y1:.3}]</text>\n",
        w / 2.0,
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>",
            path.join(" "),
            w - m - 90.0,
            m + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
