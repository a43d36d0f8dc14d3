//! Region feature networks: a small convnet over warped region crops whose
//! penultimate activations are the region descriptor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::softmax;
use crate::netcore::{FeatureMap, Layer, LrSchedule, Sequential};

/// Side of the square patch every region is warped to.
pub const CROP_SIZE: usize = 16;
/// Length of the region descriptor.
pub const FEATURE_DIM: usize = 32;
const BATCH: usize = 8;
const CODE_SIDE: usize = 4;

/// Mean cross-entropy over a batch of `(n, d, 1, 1)` logits, with its gradient.
pub fn softmax_cross_entropy(logits: &FeatureMap, labels: &[usize]) -> Result<(f64, FeatureMap)> {
    let n = logits.batch();
    let d = logits.item_len();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut grad = FeatureMap::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &u) in labels.iter().enumerate() {
        if u >= d {
            return Err(Error::Data(format!("label {u} outside {d} classes")));
        }
        let p = softmax(logits.item(i));
        loss -= p[u].max(f64::MIN_POSITIVE).ln();
        let g = &mut grad.data_mut()[i * d..(i + 1) * d];
        for (k, (gk, pk)) in g.iter_mut().zip(&p).enumerate() {
            *gk = (pk - if k == u { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Average-pools a `(1, c, s, s)` crop down to `(1, c, CODE_SIDE, CODE_SIDE)`.
fn downsample(crop: &FeatureMap) -> FeatureMap {
    let [_, c, h, w] = crop.shape();
    let (fy, fx) = (h / CODE_SIDE, w / CODE_SIDE);
    let mut out = FeatureMap::zeros([1, c, CODE_SIDE, CODE_SIDE]);
    for ch in 0..c {
        let p = crop.plane(0, ch);
        for i in 0..CODE_SIDE {
            for j in 0..CODE_SIDE {
                let mut s = 0.0;
                for y in i * fy..(i + 1) * fy {
                    for x in j * fx..(j + 1) * fx {
                        s += p[y * w + x];
                    }
                }
                out.set(0, ch, i, j, s / (fy * fx) as f64);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RegionNet {
    pub in_channels: usize,
    /// Crop to descriptor: conv-relu-pool twice, then a fully-connected layer.
    pub trunk: Sequential,
    /// Descriptor to class logits (background first).
    pub classifier: Sequential,
}

impl RegionNet {
    pub fn new(in_channels: usize, num_outputs: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = CROP_SIZE / 4;
        let trunk = Sequential::new(vec![
            Layer::conv(in_channels, 8, 3, &mut rng)?,
            Layer::relu(),
            Layer::max_pool(2, 2)?,
            Layer::conv(8, 16, 3, &mut rng)?,
            Layer::relu(),
            Layer::max_pool(2, 2)?,
            Layer::linear(16 * side * side, FEATURE_DIM, &mut rng)?,
            Layer::relu(),
        ]);
        let classifier = Sequential::new(vec![Layer::linear(FEATURE_DIM, num_outputs, &mut rng)?]);
        Ok(RegionNet {
            in_channels,
            trunk,
            classifier,
        })
    }

    /// Descriptors of a batch of crops, one row per crop.
    pub fn features(&self, crops: &FeatureMap) -> Result<Vec<Vec<f64>>> {
        let f = self.trunk.infer(crops)?;
        Ok((0..f.batch()).map(|i| f.item(i).to_vec()).collect())
    }

    /// Supervised training on region labels with a quarter of each epoch drawn
    /// from foreground regions (all of them) and the rest from background.
    /// Returns the mean loss of each epoch.
    pub fn finetune(
        &mut self,
        crops: &[FeatureMap],
        labels: &[usize],
        schedule: &LrSchedule,
        epochs: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if crops.len() != labels.len() || crops.is_empty() {
            return Err(Error::Argument("finetune needs one label per crop".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
        let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let bg_per_epoch = bg.len().min((3 * fg.len()).max(BATCH));
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            bg.shuffle(&mut rng);
            let mut order: Vec<usize> = fg.iter().chain(&bg[..bg_per_epoch]).copied().collect();
            order.shuffle(&mut rng);
            let lr = schedule.rate(epoch);
            let mut total = 0.0;
            for batch in order.chunks(BATCH) {
                let x = FeatureMap::stack(batch.iter().map(|&i| &crops[i]))?;
                let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let f = self.trunk.forward(&x)?;
                let logits = self.classifier.forward(&f)?;
                let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
                let g = self.classifier.backward(&grad)?;
                self.trunk.backward(&g)?;
                self.trunk.sgd_step(lr, schedule.weight_decay)?;
                self.classifier.sgd_step(lr, schedule.weight_decay)?;
                total += loss * batch.len() as f64;
            }
            history.push(total / order.len() as f64);
        }
        Ok(history)
    }

    /// Pretext task: reconstruct a 4x4 average-pooled copy of each crop from its
    /// descriptor through a linear decoder. Only the trunk is kept.
    pub fn pretrain_autoencoder(
        &mut self,
        crops: &[FeatureMap],
        schedule: &LrSchedule,
        epochs: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if crops.is_empty() {
            return Err(Error::Argument("autoencoder pretext needs crops".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_len = self.in_channels * CODE_SIDE * CODE_SIDE;
        let mut decoder = Sequential::new(vec![Layer::linear(FEATURE_DIM, out_len, &mut rng)?]);
        let targets: Vec<FeatureMap> = crops.iter().map(downsample).collect();
        let mut order: Vec<usize> = (0..crops.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let lr = schedule.rate(epoch);
            let mut total = 0.0;
            for batch in order.chunks(BATCH) {
                let x = FeatureMap::stack(batch.iter().map(|&i| &crops[i]))?;
                let t = FeatureMap::stack(batch.iter().map(|&i| &targets[i]))?;
                let code = self.trunk.forward(&x)?;
                let recon = decoder.forward(&code)?;
                let n = batch.len() as f64;
                let diff: Vec<f64> = recon.data().iter().zip(t.data()).map(|(r, t)| r - t).collect();
                total += diff.iter().map(|d| d * d).sum::<f64>() / out_len as f64;
                let grad = FeatureMap::from_vec(recon.shape(), diff.iter().map(|d| 2.0 * d / (n * out_len as f64)).collect())?;
                let g = decoder.backward(&grad)?;
                self.trunk.backward(&g)?;
                self.trunk.sgd_step(lr, schedule.weight_decay)?;
                decoder.sgd_step(lr, schedule.weight_decay)?;
            }
            history.push(total / crops.len() as f64);
        }
        Ok(history)
    }
}
