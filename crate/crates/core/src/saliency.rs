//! Per-class saliency grids tied to input-image pixel coordinates.

use crate::error::{GlamError, Result};
use crate::tensor::Tensor;

/// Class order used across the whole pipeline: labels, saliency channels,
/// metric reports.
pub const CLASSES: [&str; 2] = ["malignant", "benign"];
pub const N_CLASSES: usize = 2;

/// Per-class 2-D grids of values in [0,1]; `scale` converts grid coordinates
/// to input-image pixels (pixel = grid * scale).
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Tensor,
    pub scale: usize,
}

impl SaliencyMap {
    pub fn new(values: Tensor, scale: usize) -> Result<Self> {
        let (_, _, _) = values.dims3()?;
        if scale == 0 {
            return Err(GlamError::shape("saliency scale must be >= 1"));
        }
        Ok(SaliencyMap { values, scale })
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// A single class plane as an `[h, w]` tensor.
    pub fn class_plane(&self, c: usize) -> Tensor {
        self.values
            .channel(c)
            .expect("SaliencyMap validated as [C, h, w] at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_scale() {
        let m = SaliencyMap::new(Tensor::zeros(vec![2, 4, 8]), 16).unwrap();
        assert_eq!(m.classes(), 2);
        assert_eq!(m.grid(), (4, 8));
        assert_eq!(m.scale, 16);
    }

    #[test]
    fn zero_scale_rejected() {
        assert!(SaliencyMap::new(Tensor::zeros(vec![2, 4, 8]), 0).is_err());
    }
}
