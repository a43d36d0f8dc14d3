#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use depthfuse::netcore::FeatureMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> FeatureMap {
    let len = shape.iter().product();
    FeatureMap::from_vec(shape, (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
