use rand::Rng;

use super::tensor::{FeatureMap, LayerParams, Param};
use crate::error::{Error, Result};

fn kaiming_uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Param {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let value = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Param::from_values(shape, value).expect("length matches shape")
}

fn missing_cache(layer: &str) -> Error {
    Error::Usage(format!("{layer}: backward called without a cached forward pass"))
}

fn check_grad_shape(layer: &str, expected: [usize; 4], got: [usize; 4]) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "{layer}: output gradient {got:?} does not match output {expected:?}"
        )));
    }
    Ok(())
}

/// 2-D convolution, stride 1, zero "same" padding. Kernel size must be odd.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub params: LayerParams,
    cache: Option<FeatureMap>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "conv {in_channels}->{out_channels} with kernel {kernel}: need odd kernel and non-zero channels"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            params: LayerParams {
                weights: kaiming_uniform(rng, vec![out_channels, in_channels, kernel, kernel], fan_in),
                bias: Param::zeros(vec![out_channels]),
            },
            cache: None,
        })
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let (k, pad) = (self.kernel, self.kernel / 2);
        let weights = &self.params.weights.value;
        let mut out = FeatureMap::zeros([n, self.out_channels, h, w]);
        for b in 0..n {
            for oc in 0..self.out_channels {
                let start = out.offset(b, oc, 0, 0);
                let bias = self.params.bias.value[oc];
                let plane = &mut out.data_mut()[start..start + h * w];
                plane.iter_mut().for_each(|v| *v = bias);
                for ic in 0..self.in_channels {
                    let input = x.plane(b, ic);
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weights[((oc * self.in_channels + ic) * k + ky) * k + kx];
                            // valid output columns for this tap
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (w + pad).saturating_sub(kx).min(w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            for oy in 0..h {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let in_row = &input[(iy - pad) * w..(iy - pad + 1) * w];
                                let out_row = &mut plane[oy * w..(oy + 1) * w];
                                let shift = kx as isize - pad as isize;
                                for ox in x_lo..x_hi {
                                    out_row[ox] += wv * in_row[(ox as isize + shift) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("conv"))?;
        let [n, _, h, w] = x.shape();
        check_grad_shape("conv", [n, self.out_channels, h, w], grad_out.shape())?;
        let (k, pad) = (self.kernel, self.kernel / 2);
        let mut grad_in = FeatureMap::zeros(x.shape());
        let LayerParams { weights, bias } = &mut self.params;
        for b in 0..n {
            for oc in 0..self.out_channels {
                let g = grad_out.plane(b, oc);
                bias.grad[oc] += g.iter().sum::<f64>();
                for ic in 0..self.in_channels {
                    let input = x.plane(b, ic);
                    let gi_start = grad_in.offset(b, ic, 0, 0);
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                            let wv = weights.value[widx];
                            let x_lo = pad.saturating_sub(kx);
                            let x_hi = (w + pad).saturating_sub(kx).min(w);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let shift = kx as isize - pad as isize;
                            let mut wgrad = 0.0;
                            for oy in 0..h {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let row = (iy - pad) * w;
                                let g_row = &g[oy * w..(oy + 1) * w];
                                let gi = &mut grad_in.data_mut()[gi_start + row..gi_start + row + w];
                                for ox in x_lo..x_hi {
                                    let ix = (ox as isize + shift) as usize;
                                    wgrad += g_row[ox] * input[row + ix];
                                    gi[ix] += g_row[ox] * wv;
                                }
                            }
                            weights.grad[widx] += wgrad;
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// Fully-connected layer. Each batch item is flattened; output is (n, out, 1, 1).
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub params: LayerParams,
    cache: Option<FeatureMap>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::Config(format!(
                "linear {in_features}->{out_features}: zero-sized layer"
            )));
        }
        Ok(Linear {
            in_features,
            out_features,
            params: LayerParams {
                weights: kaiming_uniform(rng, vec![out_features, in_features], in_features),
                bias: Param::zeros(vec![out_features]),
            },
            cache: None,
        })
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.item_len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features per item, got {:?}",
                self.in_features,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut out = FeatureMap::zeros([n, self.out_features, 1, 1]);
        let w = &self.params.weights.value;
        for b in 0..n {
            let xi = x.item(b);
            for o in 0..self.out_features {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                let v: f64 = row.iter().zip(xi).map(|(a, b)| a * b).sum();
                out.data_mut()[b * self.out_features + o] = v + self.params.bias.value[o];
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let out = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let n = x.batch();
        check_grad_shape("linear", [n, self.out_features, 1, 1], grad_out.shape())?;
        let mut grad_in = FeatureMap::zeros(x.shape());
        let LayerParams { weights, bias } = &mut self.params;
        let fin = self.in_features;
        for b in 0..n {
            let xi = x.item(b);
            for o in 0..self.out_features {
                let g = grad_out.data()[b * self.out_features + o];
                if g == 0.0 {
                    continue;
                }
                bias.grad[o] += g;
                let wrow = &weights.value[o * fin..(o + 1) * fin];
                let gi = &mut grad_in.data_mut()[b * fin..(b + 1) * fin];
                for (gv, wv) in gi.iter_mut().zip(wrow) {
                    *gv += g * wv;
                }
                let wg = &mut weights.grad[o * fin..(o + 1) * fin];
                for (gv, xv) in wg.iter_mut().zip(xi) {
                    *gv += g * xv;
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<FeatureMap>,
}

impl Relu {
    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        x.map(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("relu"))?;
        check_grad_shape("relu", x.shape(), grad_out.shape())?;
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect();
        FeatureMap::from_vec(x.shape(), data)
    }
}

/// Max pooling with a square window. Output size uses floor division.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config("max-pool size and stride must be positive".into()));
        }
        Ok(MaxPool2d {
            size,
            stride,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = input;
        if h < self.size || w < self.size {
            return Err(Error::Shape(format!(
                "max-pool window {} larger than input {:?}",
                self.size, input
            )));
        }
        Ok([n, c, (h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1])
    }

    fn run(&self, x: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
        let shape = self.output_shape(x.shape())?;
        let [n, c, oh, ow] = shape;
        let mut out = FeatureMap::zeros(shape);
        let mut argmax = Vec::with_capacity(out.len());
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x.offset(b, ch, oy * self.stride, ox * self.stride);
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let i = x.offset(b, ch, oy * self.stride + dy, ox * self.stride + dx);
                                if x.data()[i] > x.data()[best] {
                                    best = i;
                                }
                            }
                        }
                        out.set(b, ch, oy, ox, x.data()[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.run(x).map(|(out, _)| out)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let (out, argmax) = self.run(x)?;
        self.cache = Some((argmax, x.shape()));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let (argmax, in_shape) = self.cache.as_ref().ok_or_else(|| missing_cache("max-pool"))?;
        check_grad_shape("max-pool", self.output_shape(*in_shape)?, grad_out.shape())?;
        let mut grad_in = FeatureMap::zeros(*in_shape);
        for (&src, &g) in argmax.iter().zip(grad_out.data()) {
            grad_in.data_mut()[src] += g;
        }
        Ok(grad_in)
    }
}

/// Softmax across the channel axis at every spatial position.
#[derive(Debug, Clone, Default)]
pub struct Softmax {
    cache: Option<FeatureMap>,
}

impl Softmax {
    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let [n, c, h, w] = x.shape();
        let mut out = FeatureMap::zeros(x.shape());
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let max = (0..c).map(|ch| x.get(b, ch, y, xx)).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for ch in 0..c {
                        let e = (x.get(b, ch, y, xx) - max).exp();
                        out.set(b, ch, y, xx, e);
                        total += e;
                    }
                    for ch in 0..c {
                        let v = out.get(b, ch, y, xx) / total;
                        out.set(b, ch, y, xx, v);
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let out = self.infer(x);
        self.cache = Some(out.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let p = self.cache.as_ref().ok_or_else(|| missing_cache("softmax"))?;
        check_grad_shape("softmax", p.shape(), grad_out.shape())?;
        let [n, c, h, w] = p.shape();
        let mut grad_in = FeatureMap::zeros(p.shape());
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let inner: f64 = (0..c).map(|ch| p.get(b, ch, y, x) * grad_out.get(b, ch, y, x)).sum();
                    for ch in 0..c {
                        let v = p.get(b, ch, y, x) * (grad_out.get(b, ch, y, x) - inner);
                        grad_in.set(b, ch, y, x, v);
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// Closed set of layer kinds used by every network in the crate.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Relu(Relu),
    MaxPool(MaxPool2d),
    Softmax(Softmax),
}

impl Layer {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Conv2d::new(in_channels, out_channels, kernel, rng).map(Layer::Conv)
    }

    pub fn linear(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Result<Self> {
        Linear::new(in_features, out_features, rng).map(Layer::Linear)
    }

    pub fn relu() -> Self {
        Layer::Relu(Relu::default())
    }

    pub fn max_pool(size: usize, stride: usize) -> Result<Self> {
        MaxPool2d::new(size, stride).map(Layer::MaxPool)
    }

    pub fn softmax() -> Self {
        Layer::Softmax(Softmax::default())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::Softmax(_) => "softmax",
        }
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.infer(x)),
            Layer::MaxPool(l) => l.infer(x),
            Layer::Softmax(l) => Ok(l.infer(x)),
        }
    }

    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::Softmax(l) => Ok(l.forward(x)),
        }
    }

    pub fn backward(&mut self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Layer::Conv(l) => l.backward(grad_out),
            Layer::Linear(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::MaxPool(l) => l.backward(grad_out),
            Layer::Softmax(l) => l.backward(grad_out),
        }
    }

    pub fn params(&self) -> Option<&LayerParams> {
        match self {
            Layer::Conv(l) => Some(&l.params),
            Layer::Linear(l) => Some(&l.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams> {
        match self {
            Layer::Conv(l) => Some(&mut l.params),
            Layer::Linear(l) => Some(&mut l.params),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(shape: [usize; 4], v: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = Relu::default().infer(&map([1, 1, 1, 2], &[-1.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_backward_is_flat_below_zero() {
        let mut relu = Relu::default();
        relu.forward(&map([1, 1, 1, 1], &[-1.0]));
        let g = relu.backward(&map([1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn identity_1x1_conv_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(2, 2, 1, &mut rng).unwrap();
        conv.params.weights.value = vec![1.0, 0.0, 0.0, 1.0];
        let x = map([1, 2, 2, 2], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, -7.0, 8.0]);
        assert_eq!(conv.infer(&x).unwrap(), x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 2, 3, &mut rng).unwrap();
        assert!(matches!(conv.infer(&FeatureMap::zeros([1, 2, 4, 4])), Err(Error::Shape(_))));
        assert!(matches!(Conv2d::new(3, 2, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn max_pool_picks_the_largest_of_four() {
        let pool = MaxPool2d::new(2, 2).unwrap();
        let out = pool.infer(&map([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn max_pool_floors_output_size() {
        let pool = MaxPool2d::new(2, 2).unwrap();
        assert_eq!(pool.output_shape([1, 3, 5, 7]).unwrap(), [1, 3, 2, 3]);
    }

    #[test]
    fn linear_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fc = Linear::new(3, 2, &mut rng).unwrap();
        let x = map([1, 3, 1, 1], &[0.5, -1.0, 2.0]);
        fc.forward(&x).unwrap();
        let g = map([1, 2, 1, 1], &[1.5, -0.5]);
        let gi = fc.backward(&g).unwrap();
        let w = fc.params.weights.value.clone();
        for i in 0..3 {
            let expected = w[i] * 1.5 + w[3 + i] * -0.5;
            assert!((gi.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut relu = Relu::default();
        assert!(matches!(
            relu.backward(&FeatureMap::zeros([1, 1, 1, 1])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = Softmax::default().infer(&map([1, 3, 1, 2], &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]));
        for x in 0..2 {
            let total: f64 = (0..3).map(|c| s.get(0, c, 0, x)).sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }
}
