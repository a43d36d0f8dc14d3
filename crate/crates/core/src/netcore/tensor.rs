use crate::error::{Error, Result};

/// Dense rank-4 array laid out as (batch, channel, height, width), row-major.
///
/// Gradients travel as separate `FeatureMap`s of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 4]) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        FeatureMap {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {:?} ({} cells)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    /// A batch of row vectors stored as (n, features, 1, 1).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec([rows.len(), width, 1, 1], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// One (h, w) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape[2] * self.shape[3];
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + len]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// Copies batch items `[start, end)` into a new map.
    pub fn items(&self, start: usize, end: usize) -> FeatureMap {
        let len = self.item_len();
        FeatureMap {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * len..end * len].to_vec(),
        }
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &FeatureMap) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("cannot add {:?} to {:?}", other.shape, self.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Concatenates maps along the batch axis.
    pub fn stack<'a>(items: impl IntoIterator<Item = &'a FeatureMap>) -> Result<FeatureMap> {
        let mut items = items.into_iter();
        let first = items.next().ok_or_else(|| Error::Argument("cannot stack zero maps".into()))?;
        let [mut batch, c, h, w] = first.shape;
        let mut data = first.data.clone();
        for m in items {
            if m.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", m.shape, first.shape)));
            }
            batch += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            shape: [batch, c, h, w],
            data,
        })
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            value: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn from_values(shape: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if value.len() != len {
            return Err(Error::Shape(format!(
                "{} values for parameter of shape {:?}",
                value.len(),
                shape
            )));
        }
        Ok(Param {
            shape,
            grad: vec![0.0; len],
            value,
        })
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Weights and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Param,
    pub bias: Param,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let m = FeatureMap::from_vec([2, 3, 4, 5], (0..120).map(f64::from).collect()).unwrap();
        assert_eq!(m.get(1, 2, 3, 4), 119.0);
        assert_eq!(m.get(0, 1, 0, 0), 20.0);
        assert_eq!(m.plane(1, 0)[0], 60.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(matches!(
            FeatureMap::from_vec([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn stack_concatenates_batches() {
        let a = FeatureMap::filled([1, 2, 1, 1], 1.0);
        let b = FeatureMap::filled([2, 2, 1, 1], 2.0);
        let s = FeatureMap::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), [3, 2, 1, 1]);
        assert_eq!(s.data(), &[1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
