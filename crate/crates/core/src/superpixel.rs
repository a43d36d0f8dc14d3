//! Superpixel oversegmentation, the neighbour graph with its three appearance
//! similarities, and pooling of convolutional features onto superpixels.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use crate::depth_io::RgbImage;
use crate::error::{Error, Result};
use crate::netcore::FeatureMap;

pub const COLOR_BINS: usize = 8;
pub const LBP_BINS: usize = 59;
/// Superpixels per image when nothing else is configured.
pub const DEFAULT_SUPERPIXELS: usize = 400;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Superpixel {
    pub id: usize,
    pub pixels: Vec<(usize, usize)>,
    /// Mean (row, col) of member pixels.
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub p: usize,
    pub q: usize,
    /// Colour, colour-histogram and LBP-histogram similarity.
    pub similarity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGraph {
    pub height: usize,
    pub width: usize,
    /// Node id of every pixel, row-major.
    pub labels: Vec<usize>,
    pub nodes: Vec<Superpixel>,
    /// `p < q`, each adjacent pair once, sorted.
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentationMode {
    /// Near-equal rectangular blocks.
    Grid,
    /// k-means in joint colour/position space seeded on the grid.
    Slic { compactness: f64, iterations: usize },
}

impl SegmentationMode {
    pub fn slic() -> Self {
        SegmentationMode::Slic {
            compactness: 0.15,
            iterations: 10,
        }
    }
}

impl SuperpixelGraph {
    /// Builds nodes from a per-pixel labelling. Ids are renumbered in row-major
    /// order of first appearance.
    pub fn from_labels(height: usize, width: usize, raw: &[usize]) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::Shape(format!("{} labels for {height}x{width}", raw.len())));
        }
        let mut remap = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut nodes: Vec<Superpixel> = Vec::new();
        for (i, &l) in raw.iter().enumerate() {
            let next = remap.len();
            let id = *remap.entry(l).or_insert(next);
            if id == nodes.len() {
                nodes.push(Superpixel {
                    id,
                    pixels: Vec::new(),
                    centroid: (0.0, 0.0),
                });
            }
            nodes[id].pixels.push((i / width, i % width));
            labels.push(id);
        }
        for node in &mut nodes {
            let n = node.pixels.len() as f64;
            let (sr, sc) = node
                .pixels
                .iter()
                .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
            node.centroid = (sr / n, sc / n);
        }
        Ok(SuperpixelGraph {
            height,
            width,
            labels,
            nodes,
            edges: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn label(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c]
    }

    /// 4-connected neighbouring node pairs, `p < q`, sorted.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = BTreeSet::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let a = self.label(r, c);
                if c + 1 < self.width {
                    let b = self.label(r, c + 1);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if r + 1 < self.height {
                    let b = self.label(r + 1, c);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs.into_iter().collect()
    }

    /// Fills `edges` with every adjacent pair and its similarity vector.
    pub fn connect(&mut self, image: &RgbImage, gamma: f64) -> Result<()> {
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::Argument(format!(
                "gamma must be a non-negative finite number, got {gamma}"
            )));
        }
        let descriptors = describe_regions(image, self)?;
        self.edges = self
            .adjacent_pairs()
            .into_iter()
            .map(|(p, q)| Edge {
                p,
                q,
                similarity: similarity(&descriptors[p], &descriptors[q], gamma),
            })
            .collect();
        Ok(())
    }

    /// Text dump: node lines `id centroid_r centroid_c npixels`, then edge lines `p q s1 s2 s3`.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "# superpixel graph {}x{}: {} nodes, {} edges",
            self.height,
            self.width,
            self.nodes.len(),
            self.edges.len()
        )?;
        for n in &self.nodes {
            writeln!(out, "{} {} {} {}", n.id, n.centroid.0, n.centroid.1, n.pixels.len())?;
        }
        for e in &self.edges {
            let [s1, s2, s3] = e.similarity;
            writeln!(out, "{} {} {s1} {s2} {s3}", e.p, e.q)?;
        }
        Ok(())
    }
}

/// Node and edge records recovered from a text dump (pixel membership is not stored).
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDump {
    pub nodes: Vec<(usize, (f64, f64), usize)>,
    pub edges: Vec<Edge>,
}

pub fn read_graph_text(input: impl BufRead) -> Result<GraphDump> {
    let mut dump = GraphDump {
        nodes: Vec::new(),
        edges: Vec::new(),
    };
    let mut offset = 0;
    for line in input.lines() {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let bad = |what: &str| Error::parse(start, format!("bad {what} in {t:?}"));
        match f.len() {
            4 => dump.nodes.push((
                f[0].parse().map_err(|_| bad("node id"))?,
                (
                    f[1].parse().map_err(|_| bad("centroid"))?,
                    f[2].parse().map_err(|_| bad("centroid"))?,
                ),
                f[3].parse().map_err(|_| bad("pixel count"))?,
            )),
            5 => {
                let s = |i: usize| f[i].parse::<f64>().map_err(|_| bad("similarity"));
                dump.edges.push(Edge {
                    p: f[0].parse().map_err(|_| bad("edge endpoint"))?,
                    q: f[1].parse().map_err(|_| bad("edge endpoint"))?,
                    similarity: [s(2)?, s(3)?, s(4)?],
                });
            }
            _ => return Err(Error::parse(start, format!("expected 4 or 5 fields, got {}", f.len()))),
        }
    }
    Ok(dump)
}

/// Grid dimensions `(rows, cols)` whose product is closest to `target`, preferring square cells.
fn grid_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, f64::INFINITY);
    for rows in 1..=height.min(target) {
        let ideal = target as f64 / rows as f64;
        for cols in [ideal.floor() as usize, ideal.ceil() as usize] {
            let cols = cols.clamp(1, width);
            let miss = (rows * cols).abs_diff(target);
            // within 20% every candidate is acceptable; prefer square cells then
            let tolerance = target / 5;
            let count_key = miss.saturating_sub(tolerance);
            let aspect = ((height as f64 / rows as f64) / (width as f64 / cols as f64)).ln().abs();
            let key = (count_key, aspect + miss as f64 * 1e-9);
            if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
                best_key = key;
                best = (rows, cols);
            }
        }
    }
    best
}

fn grid_labels(height: usize, width: usize, target: usize) -> Vec<usize> {
    let (rows, cols) = grid_dims(height, width, target);
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            labels.push((r * rows / height) * cols + c * cols / width);
        }
    }
    labels
}

/// Cluster centre in joint colour/position space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicCenter {
    pub color: [f64; 3],
    pub row: f64,
    pub col: f64,
}

/// Joint distance used by the SLIC assignment step (squared).
pub fn slic_distance2(center: &SlicCenter, color: [f64; 3], r: usize, c: usize, interval: f64, compactness: f64) -> f64 {
    let dc: f64 = (0..3).map(|k| (center.color[k] - color[k]).powi(2)).sum();
    let ds = (center.row - r as f64).powi(2) + (center.col - c as f64).powi(2);
    dc + ds / (interval * interval) * compactness * compactness
}

/// k-means superpixels. Returns per-pixel labels (indices into the returned
/// centres) with every pixel assigned to its nearest centre.
pub fn slic_labels(image: &RgbImage, target: usize, compactness: f64, iterations: usize) -> (Vec<usize>, Vec<SlicCenter>) {
    let (h, w) = (image.height, image.width);
    let interval = ((h * w) as f64 / target as f64).sqrt().max(1.0);
    let seeds = grid_labels(h, w, target);
    let mut centers = update_centers(image, &seeds, seeds.iter().max().map_or(0, |m| m + 1));
    let mut labels = vec![usize::MAX; h * w];
    for _ in 0..iterations.max(1) {
        let next = assign(image, &centers, interval, compactness);
        if next == labels {
            break;
        }
        labels = next;
        centers = update_centers(image, &labels, centers.len());
    }
    // the returned centres must be the ones the labels were assigned against
    let labels = assign(image, &centers, interval, compactness);
    // compact away empty clusters
    let mut used = vec![false; centers.len()];
    labels.iter().for_each(|&l| used[l] = true);
    let mut remap = vec![usize::MAX; centers.len()];
    let mut kept = Vec::new();
    for (i, c) in centers.into_iter().enumerate() {
        if used[i] {
            remap[i] = kept.len();
            kept.push(c);
        }
    }
    (labels.into_iter().map(|l| remap[l]).collect(), kept)
}

fn assign(image: &RgbImage, centers: &[SlicCenter], interval: f64, compactness: f64) -> Vec<usize> {
    let mut labels = Vec::with_capacity(image.pixel_count());
    for r in 0..image.height {
        for c in 0..image.width {
            let color = image.get(r, c);
            let mut best = (f64::INFINITY, 0);
            for (k, center) in centers.iter().enumerate() {
                let d = slic_distance2(center, color, r, c, interval, compactness);
                if d < best.0 {
                    best = (d, k);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

/// Means of member pixels; clusters that lost all members keep no centre and
/// are dropped (later labels are shifted accordingly by the caller's reassignment).
fn update_centers(image: &RgbImage, labels: &[usize], k: usize) -> Vec<SlicCenter> {
    let mut sums = vec![([0.0; 3], 0.0, 0.0, 0usize); k];
    for (i, &l) in labels.iter().enumerate() {
        let (r, c) = (i / image.width, i % image.width);
        let px = image.get(r, c);
        let s = &mut sums[l];
        for j in 0..3 {
            s.0[j] += px[j];
        }
        s.1 += r as f64;
        s.2 += c as f64;
        s.3 += 1;
    }
    sums.into_iter()
        .filter(|s| s.3 > 0)
        .map(|(col, r, c, n)| {
            let n = n as f64;
            SlicCenter {
                color: [col[0] / n, col[1] / n, col[2] / n],
                row: r / n,
                col: c / n,
            }
        })
        .collect()
}

/// Partitions the image into roughly `target` superpixels (nodes only, no edges).
pub fn oversegment(image: &RgbImage, target: usize, mode: SegmentationMode) -> Result<SuperpixelGraph> {
    let pixels = image.pixel_count();
    if pixels == 0 {
        return Err(Error::Argument("cannot oversegment an empty image".into()));
    }
    if target == 0 || target > pixels {
        return Err(Error::Argument(format!("superpixel count {target} outside [1, {pixels}]")));
    }
    let labels = match mode {
        SegmentationMode::Grid => grid_labels(image.height, image.width, target),
        SegmentationMode::Slic { compactness, iterations } => slic_labels(image, target, compactness, iterations).0,
    };
    SuperpixelGraph::from_labels(image.height, image.width, &labels)
}

/// Oversegments and connects in one go.
pub fn build_graph(image: &RgbImage, target: usize, mode: SegmentationMode, gamma: f64) -> Result<SuperpixelGraph> {
    let mut graph = oversegment(image, target, mode)?;
    graph.connect(image, gamma)?;
    Ok(graph)
}

/// Appearance observations of one superpixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    pub mean_color: [f64; 3],
    /// 8 bins per channel, concatenated, summing to 1.
    pub color_histogram: Vec<f64>,
    /// Uniform 8-neighbour LBP codes, 59 bins, summing to 1.
    pub lbp_histogram: Vec<f64>,
}

/// Maps each 8-bit LBP code to one of 58 uniform bins or the shared bin 58.
fn lbp_table() -> [u8; 256] {
    let mut table = [0u8; 256];
    let mut next = 0u8;
    for code in 0..256u32 {
        let rotated = (code >> 1) | ((code & 1) << 7);
        let transitions = (code ^ rotated).count_ones();
        table[code as usize] = if transitions <= 2 {
            next += 1;
            next - 1
        } else {
            58
        };
    }
    debug_assert_eq!(next, 58);
    table
}

/// Per-pixel uniform LBP bin (neighbours clamped at the border).
pub fn lbp_bins(image: &RgbImage) -> Vec<u8> {
    const RING: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    let table = lbp_table();
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = Vec::with_capacity(image.pixel_count());
    for r in 0..h {
        for c in 0..w {
            let center = image.gray(r as usize, c as usize);
            let mut code = 0usize;
            for (bit, (dr, dc)) in RING.iter().enumerate() {
                let rr = (r + dr).clamp(0, h - 1) as usize;
                let cc = (c + dc).clamp(0, w - 1) as usize;
                if image.gray(rr, cc) >= center {
                    code |= 1 << bit;
                }
            }
            out.push(table[code]);
        }
    }
    out
}

pub fn describe_regions(image: &RgbImage, graph: &SuperpixelGraph) -> Result<Vec<RegionDescriptor>> {
    if image.height != graph.height || image.width != graph.width {
        return Err(Error::Shape(format!(
            "image {}x{} vs graph {}x{}",
            image.height, image.width, graph.height, graph.width
        )));
    }
    let lbp = lbp_bins(image);
    Ok(graph
        .nodes
        .iter()
        .map(|node| {
            let n = node.pixels.len() as f64;
            let mut mean = [0.0; 3];
            let mut hist = vec![0.0; 3 * COLOR_BINS];
            let mut texture = vec![0.0; LBP_BINS];
            for &(r, c) in &node.pixels {
                let px = image.get(r, c);
                for k in 0..3 {
                    mean[k] += px[k] / n;
                    let bin = ((px[k] * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1);
                    hist[k * COLOR_BINS + bin] += 1.0 / (3.0 * n);
                }
                texture[lbp[r * image.width + c] as usize] += 1.0 / n;
            }
            RegionDescriptor {
                mean_color: mean,
                color_histogram: hist,
                lbp_histogram: texture,
            }
        })
        .collect())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `exp(-gamma * ||s_p - s_q||_2)` for colour, colour histogram and LBP histogram.
pub fn similarity(a: &RegionDescriptor, b: &RegionDescriptor, gamma: f64) -> [f64; 3] {
    [
        (-gamma * l2(&a.mean_color, &b.mean_color)).exp(),
        (-gamma * l2(&a.color_histogram, &b.color_histogram)).exp(),
        (-gamma * l2(&a.lbp_histogram, &b.lbp_histogram)).exp(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolAggregator {
    #[default]
    Mean,
    Max,
}

/// What `superpixel_pool` needs to route gradients back to the feature map.
#[derive(Debug, Clone)]
pub struct PoolRouting {
    in_shape: [usize; 4],
    aggregator: PoolAggregator,
    /// Plane offsets of the feature columns feeding each node.
    pub contributors: Vec<Vec<usize>>,
    /// Max mode: plane offset of the winner for each (node, channel).
    argmax: Vec<usize>,
    /// Nodes that owned no feature column and borrowed the nearest one.
    pub fallbacks: Vec<usize>,
}

/// Pools a `(1, c, fh, fw)` map with the given stride onto graph nodes, returning
/// `(nodes, c, 1, 1)`. A feature column belongs to the superpixel containing the
/// centre pixel of its stride cell.
pub fn superpixel_pool(
    features: &FeatureMap,
    graph: &SuperpixelGraph,
    stride: usize,
    aggregator: PoolAggregator,
) -> Result<(FeatureMap, PoolRouting)> {
    let [n, c, fh, fw] = features.shape();
    if n != 1 {
        return Err(Error::Shape(format!("superpixel pooling takes one image, got batch {n}")));
    }
    if stride == 0
        || fh * stride > graph.height + stride - 1
        || fh * stride + stride <= graph.height
        || fw * stride > graph.width + stride - 1
        || fw * stride + stride <= graph.width
    {
        return Err(Error::Shape(format!(
            "feature map {fh}x{fw} at stride {stride} does not cover a {}x{} image",
            graph.height, graph.width
        )));
    }
    let mut contributors = vec![Vec::new(); graph.node_count()];
    for i in 0..fh {
        for j in 0..fw {
            let r = (i * stride + stride / 2).min(graph.height - 1);
            let col = (j * stride + stride / 2).min(graph.width - 1);
            contributors[graph.label(r, col)].push(i * fw + j);
        }
    }
    let mut fallbacks = Vec::new();
    for (node, cells) in contributors.iter_mut().enumerate() {
        if cells.is_empty() {
            let (cr, cc) = graph.nodes[node].centroid;
            let centre = |k: usize| (k * stride) as f64 + (stride as f64 - 1.0) / 2.0;
            let i = (0..fh)
                .min_by(|&a, &b| (centre(a) - cr).abs().total_cmp(&(centre(b) - cr).abs()))
                .expect("non-empty map");
            let j = (0..fw)
                .min_by(|&a, &b| (centre(a) - cc).abs().total_cmp(&(centre(b) - cc).abs()))
                .expect("non-empty map");
            cells.push(i * fw + j);
            fallbacks.push(node);
        }
    }
    if !fallbacks.is_empty() {
        log::debug!(
            "superpixel pool: {} nodes fell back to the nearest feature column",
            fallbacks.len()
        );
    }

    let nodes = graph.node_count();
    let mut out = FeatureMap::zeros([nodes, c, 1, 1]);
    let mut argmax = Vec::new();
    for (node, cells) in contributors.iter().enumerate() {
        for ch in 0..c {
            let plane = features.plane(0, ch);
            let v = match aggregator {
                PoolAggregator::Mean => cells.iter().map(|&k| plane[k]).sum::<f64>() / cells.len() as f64,
                PoolAggregator::Max => {
                    let best = *cells
                        .iter()
                        .max_by(|&&a, &&b| plane[a].total_cmp(&plane[b]))
                        .expect("non-empty");
                    argmax.push(best);
                    plane[best]
                }
            };
            out.data_mut()[node * c + ch] = v;
        }
    }
    Ok((
        out,
        PoolRouting {
            in_shape: features.shape(),
            aggregator,
            contributors,
            argmax,
            fallbacks,
        },
    ))
}

impl PoolRouting {
    pub fn backward(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let [_, c, fh, fw] = self.in_shape;
        let nodes = self.contributors.len();
        if grad_out.shape() != [nodes, c, 1, 1] {
            return Err(Error::Shape(format!(
                "pool gradient {:?}, expected {:?}",
                grad_out.shape(),
                [nodes, c, 1, 1]
            )));
        }
        let mut grad_in = FeatureMap::zeros(self.in_shape);
        let plane = fh * fw;
        for (node, cells) in self.contributors.iter().enumerate() {
            for ch in 0..c {
                let g = grad_out.data()[node * c + ch];
                let base = ch * plane;
                match self.aggregator {
                    PoolAggregator::Mean => {
                        let share = g / cells.len() as f64;
                        for &k in cells {
                            grad_in.data_mut()[base + k] += share;
                        }
                    }
                    PoolAggregator::Max => {
                        grad_in.data_mut()[base + self.argmax[node * c + ch]] += g;
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tone(size: usize) -> RgbImage {
        let mut img = RgbImage::new(size, size);
        for r in 0..size {
            for c in 0..size {
                let v = if c < size / 2 { [0.9, 0.1, 0.1] } else { [0.1, 0.2, 0.8] };
                img.set(r, c, v);
            }
        }
        img
    }

    #[test]
    fn grid_4x4_into_4_blocks() {
        let g = oversegment(&RgbImage::new(4, 4), 4, SegmentationMode::Grid).unwrap();
        assert_eq!(g.node_count(), 4);
        assert!(g.nodes.iter().all(|n| n.pixels.len() == 4));
        assert_eq!(g.nodes[0].centroid, (0.5, 0.5));
    }

    #[test]
    fn single_superpixel_covers_everything() {
        for mode in [SegmentationMode::Grid, SegmentationMode::slic()] {
            let g = oversegment(&two_tone(6), 1, mode).unwrap();
            assert_eq!(g.node_count(), 1);
            assert_eq!(g.nodes[0].pixels.len(), 36);
        }
    }

    #[test]
    fn target_out_of_range_is_rejected() {
        let img = RgbImage::new(3, 3);
        assert!(matches!(
            oversegment(&img, 0, SegmentationMode::Grid),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            oversegment(&img, 10, SegmentationMode::Grid),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn slic_assignment_is_nearest_centre() {
        let img = two_tone(6);
        let (labels, centers) = slic_labels(&img, 4, 0.15, 10);
        let interval = (36.0f64 / 4.0).sqrt();
        for r in 0..6 {
            for c in 0..6 {
                let px = img.get(r, c);
                let mine = slic_distance2(&centers[labels[r * 6 + c]], px, r, c, interval, 0.15);
                for other in &centers {
                    assert!(mine <= slic_distance2(other, px, r, c, interval, 0.15) + 1e-12);
                }
            }
        }
        // boundary adherence: no superpixel straddles the colour edge
        for k in 0..centers.len() {
            let sides: BTreeSet<bool> = (0..36).filter(|&i| labels[i] == k).map(|i| i % 6 < 3).collect();
            assert_eq!(sides.len(), 1);
        }
    }

    #[test]
    fn identical_regions_are_fully_similar() {
        let img = RgbImage::filled(4, 4, [0.3, 0.6, 0.9]);
        let g = build_graph(&img, 4, SegmentationMode::Grid, 1.0).unwrap();
        assert_eq!(g.edges.len(), 4);
        for e in &g.edges {
            assert_eq!(e.similarity, [1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn zero_gamma_gives_unit_similarity() {
        let g = build_graph(&two_tone(6), 4, SegmentationMode::Grid, 0.0).unwrap();
        assert!(g.edges.iter().all(|e| e.similarity == [1.0, 1.0, 1.0]));
    }

    #[test]
    fn black_vs_white_mean_colour_similarity() {
        let mut img = RgbImage::filled(2, 4, [0.0; 3]);
        for r in 0..2 {
            for c in 2..4 {
                img.set(r, c, [1.0; 3]);
            }
        }
        let g = build_graph(&img, 2, SegmentationMode::Grid, 1.0).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!((g.edges[0].similarity[0] - (-(3.0f64).sqrt()).exp()).abs() < 1e-15);
        assert!((g.edges[0].similarity[0] - 0.1769).abs() < 1e-4);
    }

    #[test]
    fn lbp_table_has_58_uniform_codes() {
        let t = lbp_table();
        assert_eq!(t.iter().filter(|&&b| b == 58).count(), 256 - 58);
        assert_eq!(t[0], 0);
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let g = oversegment(&two_tone(8), 4, SegmentationMode::slic()).unwrap();
        let f = FeatureMap::filled([1, 2, 4, 4], 2.5);
        let (out, _) = superpixel_pool(&f, &g, 2, PoolAggregator::Mean).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn one_superpixel_pools_global_mean() {
        let g = oversegment(&RgbImage::new(4, 4), 1, SegmentationMode::Grid).unwrap();
        let f = FeatureMap::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let (out, _) = superpixel_pool(&f, &g, 1, PoolAggregator::Mean).unwrap();
        assert_eq!(out.data(), &[7.5]);
    }

    #[test]
    fn missing_column_falls_back_to_nearest() {
        // 1-pixel-wide superpixel in column 2 is never the centre of a stride-2 cell
        let labels: Vec<usize> = (0..16).map(|i| usize::from(i % 4 == 2)).collect();
        let g = SuperpixelGraph::from_labels(4, 4, &labels).unwrap();
        let f = FeatureMap::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, routing) = superpixel_pool(&f, &g, 2, PoolAggregator::Mean).unwrap();
        assert_eq!(routing.fallbacks, vec![1]);
        assert_eq!(out.data()[1], 2.0);
    }

    #[test]
    fn graph_dump_round_trip() {
        let g = build_graph(&two_tone(6), 4, SegmentationMode::Grid, 1.0).unwrap();
        let mut bytes = Vec::new();
        g.write_text(&mut bytes).unwrap();
        let dump = read_graph_text(bytes.as_slice()).unwrap();
        assert_eq!(dump.nodes.len(), 4);
        assert_eq!(dump.edges, g.edges);
        assert_eq!(dump.nodes[3], (3, g.nodes[3].centroid, 9));
    }

    proptest! {
        #[test]
        fn partition_covers_image_once(h in 1usize..12, w in 1usize..12, frac in 0.0f64..1.0, slic in any::<bool>()) {
            let target = 1 + ((h * w - 1) as f64 * frac) as usize;
            let mut img = RgbImage::new(h, w);
            for (i, v) in img.data.iter_mut().enumerate() { *v = ((i * 37) % 101) as f64 / 100.0; }
            let mode = if slic { SegmentationMode::slic() } else { SegmentationMode::Grid };
            let g = oversegment(&img, target, mode).unwrap();
            let mut seen = vec![false; h * w];
            for node in &g.nodes {
                for &(r, c) in &node.pixels {
                    prop_assert!(!seen[r * w + c]);
                    seen[r * w + c] = true;
                    prop_assert_eq!(g.label(r, c), node.id);
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn grid_count_within_twenty_percent(h in 4usize..40, w in 4usize..40, frac in 0.0f64..1.0) {
            let target = 1 + ((h * w / 4) as f64 * frac) as usize;
            let g = oversegment(&RgbImage::new(h, w), target, SegmentationMode::Grid).unwrap();
            let n = g.node_count() as f64;
            prop_assert!((n - target as f64).abs() <= 0.2 * target as f64 + 1e-9, "{} vs {}", n, target);
        }

        #[test]
        fn similarity_is_symmetric_and_bounded(seed in 0u64..500, gamma in 0.0f64..5.0) {
            let mut img = RgbImage::new(6, 6);
            for (i, v) in img.data.iter_mut().enumerate() {
                *v = ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 999.0;
            }
            let g = oversegment(&img, 4, SegmentationMode::Grid).unwrap();
            let d = describe_regions(&img, &g).unwrap();
            for a in &d {
                for b in &d {
                    let s = similarity(a, b, gamma);
                    prop_assert_eq!(s, similarity(b, a, gamma));
                    prop_assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
                }
            }
        }
    }
}
