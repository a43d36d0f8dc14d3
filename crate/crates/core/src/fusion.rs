//! RGB/depth fusion operators and the task losses.
//!
//! Detection uses `L = -log p_u + lambda_det [u >= 1] sum_i smooth_l1(t_i - v_i)`;
//! segmentation combines a per-pixel softmax log-loss on the label stream with a
//! per-pixel squared error on the depth stream, `L = L_color + lambda L_depth`.
//! Both pixel losses are sums over pixels of the upscaled maps.

use crate::depth_io::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::netcore::FeatureMap;

/// Default weight of the box-regression term.
pub const DEFAULT_LAMBDA_DET: f64 = 1.0;
/// Depth-loss weights swept in segmentation experiments.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 50.0];

/// Rectangle on a feature map, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub image_id: usize,
    pub r: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Gradient routing of one RoI pooling call.
#[derive(Debug, Clone)]
pub struct RoiPoolCache {
    in_shape: [usize; 4],
    /// Flat input offset of the winning cell for every output value.
    pub argmax: Vec<usize>,
}

impl RoiBox {
    /// Clamps the box into an `fh x fw` map, keeping at least one cell.
    pub fn clamped(&self, fh: usize, fw: usize) -> RoiBox {
        let r = self.r.min(fh - 1);
        let c = self.c.min(fw - 1);
        RoiBox {
            image_id: self.image_id,
            r,
            c,
            h: self.h.clamp(1, fh - r),
            w: self.w.clamp(1, fw - c),
        }
    }

    /// Maps a pixel box `(x1, y1, x2, y2)` onto a map with the given stride.
    pub fn from_pixels(image_id: usize, bbox: [f64; 4], stride: usize, fh: usize, fw: usize) -> RoiBox {
        let s = stride as f64;
        let c0 = (bbox[0] / s).floor().max(0.0) as usize;
        let r0 = (bbox[1] / s).floor().max(0.0) as usize;
        let c1 = (bbox[2] / s).ceil().max(1.0) as usize;
        let r1 = (bbox[3] / s).ceil().max(1.0) as usize;
        RoiBox {
            image_id,
            r: r0,
            c: c0,
            h: r1.saturating_sub(r0).max(1),
            w: c1.saturating_sub(c0).max(1),
        }
        .clamped(fh, fw)
    }
}

/// Start and end (exclusive) of bin `i` of `bins` over `extent` cells.
fn bin_bounds(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    let start = i * extent / bins;
    let end = ((i + 1) * extent).div_ceil(bins);
    (start, end.max(start + 1))
}

/// Max-pools the RoI into a fixed `out_h x out_w` grid. Bin `i` spans
/// `[floor(i h / H), ceil((i + 1) h / H))`, which is never empty for `h >= 1`.
pub fn roi_pool(features: &FeatureMap, roi: &RoiBox, out_h: usize, out_w: usize) -> Result<(FeatureMap, RoiPoolCache)> {
    let [n, c, fh, fw] = features.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument("RoI output grid must be at least 1x1".into()));
    }
    if roi.image_id >= n {
        return Err(Error::Argument(format!(
            "RoI refers to image {} of a batch of {n}",
            roi.image_id
        )));
    }
    if roi.h == 0 || roi.w == 0 {
        return Err(Error::Argument("RoI must span at least one cell".into()));
    }
    let roi = roi.clamped(fh, fw);
    let mut out = FeatureMap::zeros([1, c, out_h, out_w]);
    let mut argmax = Vec::with_capacity(out.len());
    for ch in 0..c {
        for i in 0..out_h {
            let (y0, y1) = bin_bounds(i, out_h, roi.h);
            for j in 0..out_w {
                let (x0, x1) = bin_bounds(j, out_w, roi.w);
                let mut best = features.offset(roi.image_id, ch, roi.r + y0, roi.c + x0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let k = features.offset(roi.image_id, ch, roi.r + y, roi.c + x);
                        if features.data()[k] > features.data()[best] {
                            best = k;
                        }
                    }
                }
                out.set(0, ch, i, j, features.data()[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        RoiPoolCache {
            in_shape: features.shape(),
            argmax,
        },
    ))
}

impl RoiPoolCache {
    /// Routes the pooled gradient to the argmax cells (accumulating when bins share a winner).
    pub fn backward(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        if grad_out.len() != self.argmax.len() {
            return Err(Error::Shape(format!(
                "RoI gradient has {} values, pooling produced {}",
                grad_out.len(),
                self.argmax.len()
            )));
        }
        let mut grad_in = FeatureMap::zeros(self.in_shape);
        self.accumulate(grad_out, &mut grad_in);
        Ok(grad_in)
    }

    /// Adds the routed gradient into an existing buffer (many RoIs share one map).
    pub fn accumulate(&self, grad_out: &FeatureMap, grad_in: &mut FeatureMap) {
        for (&k, &g) in self.argmax.iter().zip(grad_out.data()) {
            grad_in.data_mut()[k] += g;
        }
    }
}

/// Stacks `[a; b]` along channels. No normalization is applied.
pub fn concat_features(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat needs matching batch/spatial dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    FeatureMap::from_vec([na, ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split_channels(grad: &FeatureMap, channels_a: usize) -> Result<(FeatureMap, FeatureMap)> {
    let [n, c, h, w] = grad.shape();
    if channels_a > c {
        return Err(Error::Shape(format!("cannot take {channels_a} of {c} channels")));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * channels_a * plane);
    let mut b = Vec::with_capacity(n * (c - channels_a) * plane);
    for i in 0..n {
        let item = grad.item(i);
        a.extend_from_slice(&item[..channels_a * plane]);
        b.extend_from_slice(&item[channels_a * plane..]);
    }
    Ok((
        FeatureMap::from_vec([n, channels_a, h, w], a)?,
        FeatureMap::from_vec([n, c - channels_a, h, w], b)?,
    ))
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Regression target of a box relative to its proposal (both `(x1, y1, x2, y2)`):
/// centre offsets scaled by proposal size, log size ratios.
pub fn encode_box(proposal: [f64; 4], target: [f64; 4]) -> [f64; 4] {
    let (pw, ph) = (proposal[2] - proposal[0], proposal[3] - proposal[1]);
    let (px, py) = (proposal[0] + 0.5 * pw, proposal[1] + 0.5 * ph);
    let (gw, gh) = (target[2] - target[0], target[3] - target[1]);
    let (gx, gy) = (target[0] + 0.5 * gw, target[1] + 0.5 * gh);
    [(gx - px) / pw, (gy - py) / ph, (gw / pw).ln(), (gh / ph).ln()]
}

pub fn decode_box(proposal: [f64; 4], t: [f64; 4]) -> [f64; 4] {
    let (pw, ph) = (proposal[2] - proposal[0], proposal[3] - proposal[1]);
    let (px, py) = (proposal[0] + 0.5 * pw, proposal[1] + 0.5 * ph);
    let (cx, cy) = (px + t[0] * pw, py + t[1] * ph);
    let (w, h) = (pw * t[2].exp(), ph * t[3].exp());
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Scalar losses of one step. `total` is exactly the advertised combination.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_color: f64,
    pub l_depth: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn detection(l_cls: f64, l_loc: f64, lambda: f64) -> Self {
        LossBundle {
            l_cls,
            l_loc,
            lambda,
            total: l_cls + lambda * l_loc,
            ..Default::default()
        }
    }

    pub fn segmentation(l_color: f64, l_depth: f64, lambda: f64) -> Self {
        LossBundle {
            l_color,
            l_depth,
            lambda,
            total: l_color + lambda * l_depth,
            ..Default::default()
        }
    }

    pub fn accumulate(&mut self, other: &LossBundle) {
        self.l_color += other.l_color;
        self.l_depth += other.l_depth;
        self.l_cls += other.l_cls;
        self.l_loc += other.l_loc;
        self.total += other.total;
    }
}

pub fn box_loss(t: &[f64; 4], v: &[f64; 4]) -> f64 {
    t.iter().zip(v).map(|(a, b)| smooth_l1(a - b)).sum()
}

/// Detection loss on a class distribution `p` over `N + 1` classes (0 = background).
pub fn detection_loss(p: &[f64], u: usize, t: &[f64; 4], v: &[f64; 4], lambda_det: f64) -> Result<LossBundle> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(format!("class scores are not a distribution (sum {total})")));
    }
    if u >= p.len() {
        return Err(Error::Argument(format!("class {u} outside {} classes", p.len())));
    }
    if lambda_det < 0.0 {
        return Err(Error::Argument(format!("lambda_det must be non-negative, got {lambda_det}")));
    }
    let l_loc = if u >= 1 { box_loss(t, v) } else { 0.0 };
    Ok(LossBundle::detection(-p[u].ln(), l_loc, lambda_det))
}

/// Detection loss from raw class logits, with gradients for the logits and the
/// class-`u` box prediction (zero when `u = 0` or `lambda_det = 0`).
pub fn detection_loss_with_grad(
    logits: &[f64],
    u: usize,
    t: &[f64; 4],
    v: &[f64; 4],
    lambda_det: f64,
) -> Result<(LossBundle, Vec<f64>, [f64; 4])> {
    if u >= logits.len() {
        return Err(Error::Argument(format!("class {u} outside {} classes", logits.len())));
    }
    let p = softmax(logits);
    let bundle = detection_loss(&p, u, t, v, lambda_det)?;
    let mut d_logits = p;
    d_logits[u] -= 1.0;
    let mut d_t = [0.0; 4];
    if u >= 1 {
        for i in 0..4 {
            d_t[i] = lambda_det * smooth_l1_grad(t[i] - v[i]);
        }
    }
    Ok((bundle, d_logits, d_t))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// `-sum_ij (M_ij,label - log sum_k exp M_ijk)` over pixels whose label is not
/// [`IGNORE_LABEL`], with its gradient `softmax - onehot`.
pub fn spatial_softmax_loss(logits: &FeatureMap, labels: &[u8]) -> Result<(f64, FeatureMap)> {
    let [n, d, h, w] = logits.shape();
    if n != 1 || labels.len() != h * w {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?} (need one image at label resolution)",
            labels.len(),
            logits.shape()
        )));
    }
    let mut loss = 0.0;
    let mut grad = FeatureMap::zeros(logits.shape());
    let plane = h * w;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let label = label as usize;
        if label >= d {
            return Err(Error::Data(format!("label {label} at pixel {i} outside [0, {})", d)));
        }
        let data = logits.data();
        let max = (0..d).map(|k| data[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..d).map(|k| (data[k * plane + i] - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - data[label * plane + i];
        for k in 0..d {
            let p = (data[k * plane + i] - log_z).exp();
            grad.data_mut()[k * plane + i] = p - if k == label { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, grad))
}

/// `sum_ij (F_ij - z_ij)^2` with gradient `2 (F - z)`.
pub fn depth_regression_loss(prediction: &FeatureMap, target: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if prediction.shape() != target.shape() || prediction.channels() != 1 {
        return Err(Error::Shape(format!(
            "depth prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let diff: Vec<f64> = prediction.data().iter().zip(target.data()).map(|(f, z)| f - z).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    let grad = FeatureMap::from_vec(prediction.shape(), diff.into_iter().map(|d| 2.0 * d).collect())?;
    Ok((loss, grad))
}

/// `l_color + lambda * l_depth`.
pub fn combined_seg_loss(l_color: f64, l_depth: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::Argument(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(l_color + lambda * l_depth)
}

/// Nearest-neighbour upscaling: `out(i, j) = in(floor(i sh / th), floor(j sw / tw))`.
pub fn upscale_nearest(input: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    let [n, c, h, w] = input.shape();
    if target_h < h || target_w < w {
        return Err(Error::Argument(format!(
            "cannot upscale {h}x{w} to smaller {target_h}x{target_w}"
        )));
    }
    let mut out = FeatureMap::zeros([n, c, target_h, target_w]);
    let cols: Vec<usize> = (0..target_w).map(|j| j * w / target_w).collect();
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let base = out.offset(b, ch, 0, 0);
            for i in 0..target_h {
                let row = i * h / target_h;
                for (j, &col) in cols.iter().enumerate() {
                    out.data_mut()[base + i * target_w + j] = src[row * w + col];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upscale_nearest`]: each source cell receives the sum over its replicas.
pub fn upscale_nearest_backward(grad_out: &FeatureMap, source_shape: [usize; 4]) -> Result<FeatureMap> {
    let [n, c, h, w] = source_shape;
    let [gn, gc, th, tw] = grad_out.shape();
    if (gn, gc) != (n, c) || th < h || tw < w {
        return Err(Error::Shape(format!(
            "upscale gradient {:?} incompatible with source {source_shape:?}",
            grad_out.shape()
        )));
    }
    let mut grad_in = FeatureMap::zeros(source_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let base = grad_in.offset(b, ch, 0, 0);
            for i in 0..th {
                let row = i * h / th;
                for j in 0..tw {
                    grad_in.data_mut()[base + row * w + j * w / tw] += g[i * tw + j];
                }
            }
        }
    }
    Ok(grad_in)
}

/// Bilinear warp of a pixel-space box `(x1, y1, x2, y2)` of a `(1, c, h, w)`
/// map into a fixed `size x size` patch (coordinates are clamped at borders).
pub fn warp_region(image: &FeatureMap, bbox: [f64; 4], size: usize) -> Result<FeatureMap> {
    let [n, c, h, w] = image.shape();
    if n != 1 || size == 0 {
        return Err(Error::Argument(
            "warp_region takes one image and a non-zero patch size".into(),
        ));
    }
    let mut out = FeatureMap::zeros([1, c, size, size]);
    let (bw, bh) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
    for i in 0..size {
        let y = (bbox[1] + (i as f64 + 0.5) * bh / size as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..size {
            let x = (bbox[0] + (j as f64 + 0.5) * bw / size as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let p = image.plane(0, ch);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.set(0, ch, i, j, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-1.0), 0.5);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(0.5), 0.125);
    }

    #[test]
    fn smooth_l1_derivative_is_continuous_at_one() {
        for x in [1.0f64, -1.0] {
            let eps = 1e-9;
            let left = (smooth_l1(x) - smooth_l1(x - eps)) / eps;
            let right = (smooth_l1(x + eps) - smooth_l1(x)) / eps;
            assert!((left - x.signum()).abs() < 1e-6);
            assert!((right - x.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn background_has_no_box_loss() {
        let l = detection_loss(&[0.7, 0.3], 0, &[5.0; 4], &[-5.0; 4], 1.0).unwrap();
        assert_eq!(l.total, -(0.7f64).ln());
        assert_eq!(l.l_loc, 0.0);
    }

    #[test]
    fn perfect_detection_has_zero_loss() {
        let l = detection_loss(&[0.0, 1.0], 1, &[0.3; 4], &[0.3; 4], 1.0).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn detection_loss_hand_case() {
        let l = detection_loss(&[0.5, 0.5], 1, &[1.0, 0.0, 0.0, 0.0], &[0.0; 4], 1.0).unwrap();
        assert!((l.total - (2.0f64.ln() + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_scores_break_the_contract() {
        assert!(matches!(
            detection_loss(&[0.5, 0.6], 1, &[0.0; 4], &[0.0; 4], 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_lambda_det_gives_no_box_gradient() {
        let (_, _, d_t) = detection_loss_with_grad(&[0.1, 0.2], 1, &[3.0; 4], &[0.0; 4], 0.0).unwrap();
        assert_eq!(d_t, [0.0; 4]);
    }

    #[test]
    fn uniform_logits_loss() {
        let (h, w, d) = (3, 4, 5);
        let logits = FeatureMap::zeros([1, d, h, w]);
        let labels: Vec<u8> = (0..h * w).map(|i| (i % d) as u8).collect();
        let (l, _) = spatial_softmax_loss(&logits, &labels).unwrap();
        assert!((l - (h * w) as f64 * (d as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_have_vanishing_loss() {
        let mut logits = FeatureMap::zeros([1, 3, 1, 2]);
        logits.set(0, 2, 0, 0, 1000.0);
        logits.set(0, 0, 0, 1, 1000.0);
        let (l, _) = spatial_softmax_loss(&logits, &[2, 0]).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = FeatureMap::zeros([1, 2, 1, 1]);
        assert!(matches!(spatial_softmax_loss(&logits, &[2]), Err(Error::Data(_))));
        assert_eq!(spatial_softmax_loss(&logits, &[IGNORE_LABEL]).unwrap().0, 0.0);
    }

    #[test]
    fn depth_loss_counts_pixels() {
        let z = FeatureMap::filled([1, 1, 2, 3], 2.0);
        assert_eq!(depth_regression_loss(&z, &z).unwrap().0, 0.0);
        let f = FeatureMap::filled([1, 1, 2, 3], 3.0);
        assert_eq!(depth_regression_loss(&f, &z).unwrap().0, 6.0);
        let bad = FeatureMap::filled([1, 1, 3, 2], 3.0);
        assert!(matches!(depth_regression_loss(&bad, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_seg_loss(2.0, 3.0, 0.0).unwrap(), 2.0);
        assert_eq!(combined_seg_loss(2.0, 3.0, 1.0).unwrap(), 5.0);
        assert!(matches!(combined_seg_loss(2.0, 3.0, -0.1), Err(Error::Argument(_))));
        assert_eq!(LAMBDA_GRID, [0.1, 1.0, 10.0, 50.0]);
    }

    #[test]
    fn upscale_by_two_replicates_blocks() {
        let m = FeatureMap::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upscale_nearest(&m, 4, 4).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(upscale_nearest(&m, 2, 2).unwrap(), m);
        assert!(matches!(upscale_nearest(&m, 1, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn roi_of_output_size_is_copied() {
        let f = FeatureMap::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let roi = RoiBox {
            image_id: 0,
            r: 1,
            c: 1,
            h: 2,
            w: 2,
        };
        let (out, _) = roi_pool(&f, &roi, 2, 2).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn roi_bins_cover_small_boxes() {
        // 1-cell RoI into 3x3: every bin sees the one cell
        let f = FeatureMap::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let roi = RoiBox {
            image_id: 0,
            r: 1,
            c: 0,
            h: 1,
            w: 1,
        };
        let (out, _) = roi_pool(&f, &roi, 3, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn roi_from_pixels_respects_stride() {
        let roi = RoiBox::from_pixels(0, [4.0, 2.0, 13.0, 9.0], 2, 8, 8);
        assert_eq!(
            roi,
            RoiBox {
                image_id: 0,
                r: 1,
                c: 2,
                h: 4,
                w: 5
            }
        );
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let x = FeatureMap::from_vec([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let empty = FeatureMap::zeros([2, 0, 1, 1]);
        assert_eq!(concat_features(&x, &empty).unwrap(), x);
        let y = FeatureMap::filled([2, 1, 1, 1], 9.0);
        let both = concat_features(&x, &y).unwrap();
        assert_eq!(both.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
        let (a, b) = split_channels(&both, 2).unwrap();
        assert_eq!((a, b), (x, y));
        assert!(matches!(
            concat_features(&FeatureMap::zeros([1, 1, 2, 2]), &FeatureMap::zeros([1, 1, 2, 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn box_coding_round_trips() {
        let p = [2.0, 3.0, 12.0, 9.0];
        let g = [1.0, 4.0, 10.0, 12.0];
        let t = encode_box(p, g);
        let back = decode_box(p, t);
        for k in 0..4 {
            assert!((back[k] - g[k]).abs() < 1e-12);
        }
        assert_eq!(encode_box(p, p), [0.0; 4]);
    }

    #[test]
    fn warp_of_full_image_at_native_size_is_identity() {
        let f = FeatureMap::from_vec([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let out = warp_region(&f, [0.0, 0.0, 3.0, 3.0], 3).unwrap();
        assert_eq!(out, f);
    }

    proptest! {
        #[test]
        fn roi_pool_ignores_cells_outside(seed in 0u64..1000, r in 0usize..4, c in 0usize..4, h in 1usize..5, w in 1usize..5) {
            let mut f = FeatureMap::from_vec([1, 2, 6, 6], (0..72).map(|i| ((i as u64 * 7919 + seed) % 97) as f64).collect()).unwrap();
            let roi = RoiBox { image_id: 0, r, c, h, w }.clamped(6, 6);
            let (before, _) = roi_pool(&f, &roi, 2, 2).unwrap();
            for y in 0..6 {
                for x in 0..6 {
                    let inside = y >= roi.r && y < roi.r + roi.h && x >= roi.c && x < roi.c + roi.w;
                    if !inside {
                        for ch in 0..2 { f.set(0, ch, y, x, 1e6); }
                    }
                }
            }
            let (after, _) = roi_pool(&f, &roi, 2, 2).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn softmax_loss_is_shift_invariant(values in proptest::collection::vec(-5.0f64..5.0, 12), shift in -50.0f64..50.0) {
            let logits = FeatureMap::from_vec([1, 3, 2, 2], values).unwrap();
            let labels = [0u8, 1, 2, 1];
            let (l1, _) = spatial_softmax_loss(&logits, &labels).unwrap();
            let mut shifted = logits.clone();
            for i in 0..4 {
                for k in 0..3 { shifted.data_mut()[k * 4 + i] += shift * (i as f64 + 1.0); }
            }
            let (l2, _) = spatial_softmax_loss(&shifted, &labels).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-9);
        }

        #[test]
        fn combined_loss_is_linear_in_lambda(c in 0.0f64..10.0, d in 0.0f64..10.0, a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let la = combined_seg_loss(c, d, a).unwrap();
            let lb = combined_seg_loss(c, d, b).unwrap();
            prop_assert!(((lb - la) - (b - a) * d).abs() <= 1e-12 * (1.0 + la.abs() + lb.abs()));
        }
    }
}
