//! Finite-difference checks of every backward pass. Each op runs a batch of
//! random cases with the scalar `L = sum(w * out)` for a random weight map `w`
//! and reports the worst relative error against central differences.

use depthfuse::crf::CrfInstance;
use depthfuse::depth_io::{RgbImage, IGNORE_LABEL};
use depthfuse::fusion::{
    concat_features, depth_regression_loss, detection_loss_with_grad, roi_pool, spatial_softmax_loss, split_channels,
    upscale_nearest, upscale_nearest_backward, RoiBox,
};
use depthfuse::netcore::{FeatureMap, Layer, Sequential};
use depthfuse::superpixel::{oversegment, superpixel_pool, PoolAggregator, SegmentationMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{oracle, random_map, rel_err, rng};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const EXACT_TOLERANCE: f64 = 1e-6;
pub const CASES: usize = 24;
const H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn max_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max)
}

fn run(op: &'static str, seed: u64, tolerance: f64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradReport {
    let mut rng = rng(seed);
    let max_error = (0..CASES).map(|_| case(&mut rng)).fold(0.0, f64::max);
    GradReport {
        op,
        cases: CASES,
        max_error,
        tolerance,
    }
}

fn with_data(shape: [usize; 4], v: &[f64]) -> FeatureMap {
    FeatureMap::from_vec(shape, v.to_vec()).unwrap()
}

/// Random map whose entries stay at least `gap` away from zero.
fn map_off_zero(rng: &mut ChaCha8Rng, shape: [usize; 4], gap: f64) -> FeatureMap {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    FeatureMap::from_vec(shape, data).unwrap()
}

fn sequential_error(net: &mut Sequential, x: &FeatureMap, rng: &mut ChaCha8Rng) -> f64 {
    let y = net.forward(x).unwrap();
    let w = random_map(rng, y.shape(), 1.0);
    net.zero_grad();
    let gx = net.backward(&w).unwrap();
    let probe = net.clone();
    let mut err = max_error(
        gx.data(),
        &numeric_grad(x.data(), |v| probe.infer(&with_data(x.shape(), v)).unwrap().dot(&w)),
    );
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
    for (k, grad) in analytic.iter().enumerate() {
        let values = probe.params()[k].value.clone();
        let numeric = numeric_grad(&values, |v| {
            let mut moved = probe.clone();
            moved.params_mut()[k].value.copy_from_slice(v);
            moved.infer(x).unwrap().dot(&w)
        });
        err = err.max(max_error(grad, &numeric));
    }
    err
}

fn layer_error(layer: Layer, x: &FeatureMap, rng: &mut ChaCha8Rng) -> f64 {
    sequential_error(&mut Sequential::new(vec![layer]), x, rng)
}

pub fn conv(seed: u64) -> GradReport {
    run("conv", seed, LAYER_TOLERANCE, |rng| {
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let shape = [rng.gen_range(1..=2), cin, rng.gen_range(3..=5), rng.gen_range(3..=5)];
        let x = random_map(rng, shape, 1.0);
        let layer = Layer::conv(cin, cout, k, rng).unwrap();
        layer_error(layer, &x, rng)
    })
}

pub fn linear(seed: u64) -> GradReport {
    run("linear", seed, LAYER_TOLERANCE, |rng| {
        let inputs = rng.gen_range(1..=6);
        let outputs = rng.gen_range(1..=4);
        let batch = rng.gen_range(1..=3);
        let x = random_map(rng, [batch, inputs, 1, 1], 1.0);
        let layer = Layer::linear(inputs, outputs, rng).unwrap();
        layer_error(layer, &x, rng)
    })
}

pub fn relu(seed: u64) -> GradReport {
    run("relu", seed, LAYER_TOLERANCE, |rng| {
        let x = map_off_zero(rng, [1, 2, 3, 4], 1e-3);
        layer_error(Layer::relu(), &x, rng)
    })
}

pub fn max_pool(seed: u64) -> GradReport {
    run("maxpool", seed, LAYER_TOLERANCE, |rng| {
        let (size, stride) = if rng.gen_bool(0.5) { (2, 2) } else { (3, 1) };
        let x = random_map(rng, [1, 2, 5, 6], 1.0);
        layer_error(Layer::max_pool(size, stride).unwrap(), &x, rng)
    })
}

pub fn softmax_layer(seed: u64) -> GradReport {
    run("softmax", seed, LAYER_TOLERANCE, |rng| {
        let channels = rng.gen_range(2..=5);
        let x = random_map(rng, [2, channels, 2, 2], 2.0);
        layer_error(Layer::softmax(), &x, rng)
    })
}

pub fn sequential(seed: u64) -> GradReport {
    run("sequential", seed, LAYER_TOLERANCE, |rng| {
        let mut net = Sequential::new(vec![
            Layer::conv(2, 3, 3, rng).unwrap(),
            Layer::relu(),
            Layer::max_pool(2, 2).unwrap(),
            Layer::linear(12, 4, rng).unwrap(),
            Layer::softmax(),
        ]);
        let x = random_map(rng, [2, 2, 4, 4], 1.0);
        sequential_error(&mut net, &x, rng)
    })
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
    let mut image = RgbImage::new(h, w);
    image.data.iter_mut().for_each(|v| *v = rng.gen());
    image
}

fn pool_report(op: &'static str, seed: u64, aggregator: PoolAggregator) -> GradReport {
    run(op, seed, EXACT_TOLERANCE, |rng| {
        let image = random_image(rng, 8, 8);
        let graph = oversegment(&image, rng.gen_range(3..=8), SegmentationMode::Grid).unwrap();
        let channels = rng.gen_range(1..=3);
        let x = random_map(rng, [1, channels, 4, 4], 1.0);
        let (out, routing) = superpixel_pool(&x, &graph, 2, aggregator).unwrap();
        let w = random_map(rng, out.shape(), 1.0);
        let gx = routing.backward(&w).unwrap();
        let numeric = numeric_grad(x.data(), |v| {
            superpixel_pool(&with_data(x.shape(), v), &graph, 2, aggregator)
                .unwrap()
                .0
                .dot(&w)
        });
        max_error(gx.data(), &numeric)
    })
}

pub fn superpixel_pool_mean(seed: u64) -> GradReport {
    pool_report("superpixel pool (mean)", seed, PoolAggregator::Mean)
}

pub fn superpixel_pool_max(seed: u64) -> GradReport {
    pool_report("superpixel pool (max)", seed, PoolAggregator::Max)
}

pub fn roi_pooling(seed: u64) -> GradReport {
    run("roi pool", seed, EXACT_TOLERANCE, |rng| {
        let x = random_map(rng, [1, 2, 6, 6], 1.0);
        let r = rng.gen_range(0..5);
        let c = rng.gen_range(0..5);
        let roi = RoiBox {
            image_id: 0,
            r,
            c,
            h: rng.gen_range(1..=6 - r),
            w: rng.gen_range(1..=6 - c),
        };
        let bins = rng.gen_range(1..=3);
        let (out, cache) = roi_pool(&x, &roi, bins, bins).unwrap();
        let w = random_map(rng, out.shape(), 1.0);
        let gx = cache.backward(&w).unwrap();
        let numeric = numeric_grad(x.data(), |v| {
            roi_pool(&with_data(x.shape(), v), &roi, bins, bins).unwrap().0.dot(&w)
        });
        max_error(gx.data(), &numeric)
    })
}

pub fn upscale(seed: u64) -> GradReport {
    run("upscale nearest", seed, EXACT_TOLERANCE, |rng| {
        let shape = [1, 2, rng.gen_range(1..=4), rng.gen_range(1..=4)];
        let (th, tw) = (shape[2] + rng.gen_range(0..5), shape[3] + rng.gen_range(0..5));
        let x = random_map(rng, shape, 1.0);
        let w = random_map(rng, [1, 2, th, tw], 1.0);
        let gx = upscale_nearest_backward(&w, shape).unwrap();
        let numeric = numeric_grad(x.data(), |v| upscale_nearest(&with_data(shape, v), th, tw).unwrap().dot(&w));
        max_error(gx.data(), &numeric)
    })
}

pub fn concat(seed: u64) -> GradReport {
    run("concat", seed, EXACT_TOLERANCE, |rng| {
        let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let a = random_map(rng, [2, ca, 3, 2], 1.0);
        let b = random_map(rng, [2, cb, 3, 2], 1.0);
        let w = random_map(rng, [2, ca + cb, 3, 2], 1.0);
        let (ga, gb) = split_channels(&w, ca).unwrap();
        let na = numeric_grad(a.data(), |v| concat_features(&with_data(a.shape(), v), &b).unwrap().dot(&w));
        let nb = numeric_grad(b.data(), |v| concat_features(&a, &with_data(b.shape(), v)).unwrap().dot(&w));
        max_error(ga.data(), &na).max(max_error(gb.data(), &nb))
    })
}

pub fn spatial_softmax(seed: u64) -> GradReport {
    run("spatial softmax loss", seed, EXACT_TOLERANCE, |rng| {
        let d = rng.gen_range(2..=5);
        let logits = random_map(rng, [1, d, 3, 4], 2.0);
        let labels: Vec<u8> = (0..12)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    IGNORE_LABEL
                } else {
                    rng.gen_range(0..d as u8)
                }
            })
            .collect();
        let (_, grad) = spatial_softmax_loss(&logits, &labels).unwrap();
        let numeric = numeric_grad(logits.data(), |v| {
            spatial_softmax_loss(&with_data(logits.shape(), v), &labels).unwrap().0
        });
        max_error(grad.data(), &numeric)
    })
}

pub fn depth_regression(seed: u64) -> GradReport {
    run("depth regression loss", seed, EXACT_TOLERANCE, |rng| {
        let pred = random_map(rng, [1, 1, 3, 4], 2.0);
        let target = random_map(rng, [1, 1, 3, 4], 2.0);
        let (_, grad) = depth_regression_loss(&pred, &target).unwrap();
        let numeric = numeric_grad(pred.data(), |v| {
            depth_regression_loss(&with_data(pred.shape(), v), &target).unwrap().0
        });
        max_error(grad.data(), &numeric)
    })
}

pub fn detection(seed: u64) -> GradReport {
    run("detection loss", seed, EXACT_TOLERANCE, |rng| {
        let classes = rng.gen_range(2..=5);
        let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let u = rng.gen_range(0..classes);
        let v: [f64; 4] = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        let t: [f64; 4] = std::array::from_fn(|i| {
            let d = if rng.gen_bool(0.5) {
                rng.gen_range(0.05..0.9)
            } else {
                rng.gen_range(1.1..2.0)
            };
            v[i] + if rng.gen_bool(0.5) { d } else { -d }
        });
        let lambda = rng.gen_range(0.0..2.0);
        let (_, d_logits, d_t) = detection_loss_with_grad(&logits, u, &t, &v, lambda).unwrap();
        let nl = numeric_grad(&logits, |l| detection_loss_with_grad(l, u, &t, &v, lambda).unwrap().0.total);
        let nt = numeric_grad(&t, |x| {
            let t: [f64; 4] = x.try_into().unwrap();
            detection_loss_with_grad(&logits, u, &t, &v, lambda).unwrap().0.total
        });
        max_error(&d_logits, &nl).max(max_error(&d_t, &nt))
    })
}

pub fn crf_nll(seed: u64) -> GradReport {
    run("crf nll", seed, EXACT_TOLERANCE, |rng| {
        let n = rng.gen_range(2..=8);
        let mut inst = oracle::random_instance(rng, n, 0.6, 1.0);
        inst.beta = inst.beta.map(|b| b + 0.01);
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let inst = inst.with_ground_truth(gt).unwrap();
        let grads = inst.nll_grads().unwrap();
        let nz = numeric_grad(&inst.z, |z| {
            CrfInstance {
                z: z.to_vec(),
                ..inst.clone()
            }
            .nll()
            .unwrap()
        });
        let nb = numeric_grad(&inst.beta, |b| {
            CrfInstance {
                beta: b.try_into().unwrap(),
                ..inst.clone()
            }
            .nll()
            .unwrap()
        });
        max_error(&grads.d_z, &nz).max(max_error(&grads.d_beta, &nb))
    })
}

/// Every op in the suite, each seeded separately.
pub fn full_suite(seed: u64) -> Vec<GradReport> {
    let ops: [fn(u64) -> GradReport; 15] = [
        conv,
        linear,
        relu,
        max_pool,
        softmax_layer,
        sequential,
        superpixel_pool_mean,
        superpixel_pool_max,
        roi_pooling,
        upscale,
        concat,
        spatial_softmax,
        depth_regression,
        detection,
        crf_nll,
    ];
    ops.iter()
        .enumerate()
        .map(|(k, op)| op(seed.wrapping_add(k as u64)))
        .collect()
}
