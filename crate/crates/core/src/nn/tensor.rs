use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major float64 array.
///
/// Gradients are not stored on the tensor itself; a [`Tape`](super::Tape)
/// owns every recorded value together with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel = checked_numel(&shape)?;
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(low..high)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Leading-axis slice `index` of a tensor with rank >= 1.
    pub fn select(&self, index: usize) -> Result<Tensor> {
        let (&outer, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("cannot select from a scalar"))?;
        if index >= outer {
            return Err(Error::shape(format!("index {index} out of range {outer}")));
        }
        let inner: usize = rest.iter().product();
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(format!("stack of {:?} and {:?}", first.shape, p.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// `[N, T, ...]` -> `[N, ...]` for a fixed `t`.
    pub fn select_axis1(&self, t: usize) -> Result<Tensor> {
        if self.rank() < 2 || t >= self.shape[1] {
            return Err(Error::shape(format!("cannot take step {t} of shape {:?}", self.shape)));
        }
        let n = self.shape[0];
        let steps = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * inner);
        for i in 0..n {
            let base = (i * steps + t) * inner;
            data.extend_from_slice(&self.data[base..base + inner]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape[2..]);
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionOverflow(format!("shape {shape:?}")))
}
