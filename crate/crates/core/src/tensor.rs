//! Dense n-dimensional array of `f64` values with shape metadata.
//!
//! Row-major storage. Carrier for images, feature maps, parameters and
//! gradients throughout the pipeline.

use crate::error::{GlamError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(GlamError::shape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(GlamError::shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with numel != 1");
        self.data[0]
    }

    /// Interpret as [C, H, W]; errors otherwise.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(GlamError::shape(format!("expected rank-3, got {other:?}"))),
        }
    }

    /// Interpret as [H, W]; errors otherwise.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((h, w)),
            other => Err(GlamError::shape(format!("expected rank-2, got {other:?}"))),
        }
    }

    /// 2-D slice `[h, w]` of channel `c` from a `[C, h, w]` tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = self.dims3()?;
        if c >= ch {
            return Err(GlamError::shape(format!("channel {c} out of {ch}")));
        }
        let plane = h * w;
        Tensor::new(vec![h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
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

    /// Maximum absolute elementwise difference; infinity on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
