//! Minimal reverse-mode layer set: convolution, fully-connected, ReLU,
//! max-pool and softmax over `(n, c, h, w)` feature maps, all in `f64`.
//!
//! Layers cache their input on `forward` and consume the cache in `backward`,
//! which accumulates parameter gradients. `infer` is the pure, cache-free path
//! used at evaluation time and from worker threads.

mod checkpoint;
mod layers;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use layers::{Conv2d, Layer, Linear, MaxPool2d, Relu, Softmax};
pub use tensor::{FeatureMap, LayerParams, Param};

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Weight decay used by every training loop unless overridden.
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

/// Step-decayed learning rate: `base * decay^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
    pub weight_decay: f64,
}

impl Default for LrSchedule {
    /// lr 1e-7, x0.4 every 5 epochs, wd 5e-4. Toy networks need a much larger `base`.
    fn default() -> Self {
        LrSchedule {
            base: 1e-7,
            decay: 0.4,
            every: 5,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl LrSchedule {
    pub fn with_base(base: f64) -> Self {
        LrSchedule { base, ..Self::default() }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Plain SGD with L2 weight decay: `w <- w - lr * (grad + wd * w)`, then zero the grads.
///
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step(params: &mut [&mut Param], learning_rate: f64, weight_decay: f64) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if let Some(j) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {} at entry {j} of parameter #{i} (shape {:?})",
                p.grad[j], p.shape
            )));
        }
    }
    for p in params.iter_mut() {
        let Param { value, grad, .. } = &mut **p;
        for (w, g) in value.iter_mut().zip(grad.iter_mut()) {
            *w -= learning_rate * (*g + weight_decay * *w);
            *g = 0.0;
        }
    }
    Ok(())
}

/// A feed-forward stack of layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    /// Runs layers `[0, end)` without caching.
    pub fn infer_prefix(&self, x: &FeatureMap, end: usize) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for layer in &self.layers[..end] {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|p| [&p.weights, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|p| [&mut p.weights, &mut p.bias])
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn sgd_step(&mut self, learning_rate: f64, weight_decay: f64) -> Result<()> {
        sgd_step(&mut self.params_mut(), learning_rate, weight_decay)
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters as named tensors `{prefix}.{layer}.weight|bias`.
    pub fn export(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(p) = layer.params() {
                out.push(NamedTensor::new(format!("{prefix}.{i}.weight"), &p.weights));
                out.push(NamedTensor::new(format!("{prefix}.{i}.bias"), &p.bias));
            }
        }
        out
    }

    /// Loads parameters exported under `prefix`; every tensor must be present with a matching shape.
    pub fn import(&mut self, prefix: &str, tensors: &HashMap<String, NamedTensor>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(p) = layer.params_mut() {
                for (suffix, param) in [("weight", &mut p.weights), ("bias", &mut p.bias)] {
                    let name = format!("{prefix}.{i}.{suffix}");
                    let t = tensors
                        .get(&name)
                        .ok_or_else(|| Error::Data(format!("checkpoint has no tensor {name}")))?;
                    if t.shape != param.shape {
                        return Err(Error::Shape(format!(
                            "{name}: checkpoint shape {:?}, network expects {:?}",
                            t.shape, param.shape
                        )));
                    }
                    param.value.clone_from(&t.values);
                    param.zero_grad();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_in_steps() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 1e-7);
        assert_eq!(s.rate(4), 1e-7);
        assert!((s.rate(5) - 0.4e-7).abs() < 1e-22);
        assert!((s.rate(12) - 0.16e-7).abs() < 1e-22);
        assert_eq!(s.weight_decay, 0.0005);
    }

    #[test]
    fn sgd_leaves_weight_without_gradient() {
        let mut p = Param::from_values(vec![1], vec![1.0]).unwrap();
        sgd_step(&mut [&mut p], 0.1, 0.0).unwrap();
        assert_eq!(p.value, vec![1.0]);
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Param::from_values(vec![1], vec![0.0]).unwrap();
        p.grad[0] = 2.0;
        sgd_step(&mut [&mut p], 0.5, 0.0).unwrap();
        assert_eq!(p.value, vec![-1.0]);
        assert_eq!(p.grad, vec![0.0]);
    }

    #[test]
    fn sgd_applies_weight_decay() {
        let mut p = Param::from_values(vec![1], vec![2.0]).unwrap();
        sgd_step(&mut [&mut p], 0.1, DEFAULT_WEIGHT_DECAY).unwrap();
        assert!((p.value[0] - (2.0 - 0.1 * 0.0005 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut p = Param::from_values(vec![2], vec![1.0, 1.0]).unwrap();
        p.grad[1] = f64::NAN;
        let err = sgd_step(&mut [&mut p], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(p.value, vec![1.0, 1.0]);
    }
}
