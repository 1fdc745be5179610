//! In-memory dataset: 8-bit images and binary masks, converted to tensors on
//! demand. Keeping examples in the quantized on-disk representation makes an
//! in-process run and a write-then-reload run bit-identical.

use crate::error::{GlamError, Result};
use crate::saliency::N_CLASSES;
use crate::tensor::Tensor;

pub const CLASS_MALIGNANT: usize = 0;
pub const CLASS_BENIGN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major 8-bit intensities.
    pub image: Vec<u8>,
    /// labels[0] = malignant, labels[1] = benign.
    pub labels: [bool; N_CLASSES],
    /// 0/1 per pixel; present iff the matching label is positive.
    pub masks: [Option<Vec<u8>>; N_CLASSES],
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != n {
            return Err(GlamError::shape(format!(
                "example {}: image has {} pixels for {}x{}",
                self.id,
                self.image.len(),
                self.height,
                self.width
            )));
        }
        for c in 0..N_CLASSES {
            match (&self.masks[c], self.labels[c]) {
                (Some(m), true) => {
                    if m.len() != n {
                        return Err(GlamError::shape(format!(
                            "example {}: mask size {} for {}x{}",
                            self.id,
                            m.len(),
                            self.height,
                            self.width
                        )));
                    }
                    if m.iter().any(|&v| v > 1) {
                        return Err(GlamError::config(format!(
                            "example {}: mask values must be 0/1",
                            self.id
                        )));
                    }
                    if m.iter().all(|&v| v == 0) {
                        return Err(GlamError::config(format!(
                            "example {}: positive label with empty mask",
                            self.id
                        )));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(GlamError::config(format!(
                        "example {}: mask present with negative label",
                        self.id
                    )))
                }
                (None, true) => {
                    return Err(GlamError::config(format!(
                        "example {}: positive label without mask",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn positive(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }

    pub fn label_vec(&self) -> [f64; N_CLASSES] {
        [self.labels[0] as u8 as f64, self.labels[1] as u8 as f64]
    }

    /// [1, H, W] tensor with intensities in [0, 1].
    pub fn image_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("validated size")
    }

    /// Image with columns reversed (horizontal flip augmentation).
    pub fn image_tensor_flipped(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.image.len());
        for r in 0..self.height {
            for c in 0..self.width {
                data.push(self.image[r * self.width + (self.width - 1 - c)] as f64 / 255.0);
            }
        }
        Tensor::new(vec![1, self.height, self.width], data).expect("validated size")
    }

    /// [H, W] 0/1 ground-truth plane for a class; zeros when the label is negative.
    pub fn mask_plane(&self, class: usize) -> Tensor {
        let data = match &self.masks[class] {
            Some(m) => m.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; self.height * self.width],
        };
        Tensor::new(vec![self.height, self.width], data).expect("validated size")
    }

    pub fn mask_area(&self, class: usize) -> usize {
        self.masks[class]
            .as_ref()
            .map(|m| m.iter().filter(|&&v| v == 1).count())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        for e in &examples {
            e.validate()?;
        }
        Ok(Dataset { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].positive())
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| !self.examples[i].positive())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: [bool; 2], masks: [Option<Vec<u8>>; 2]) -> Example {
        Example {
            id: "t".into(),
            height: 2,
            width: 2,
            image: vec![0, 128, 255, 64],
            labels,
            masks,
        }
    }

    #[test]
    fn validate_enforces_label_mask_pairing() {
        assert!(tiny([false, false], [None, None]).validate().is_ok());
        assert!(tiny([true, false], [Some(vec![0, 1, 0, 0]), None]).validate().is_ok());
        assert!(tiny([true, false], [None, None]).validate().is_err());
        assert!(tiny([false, false], [Some(vec![0, 1, 0, 0]), None]).validate().is_err());
        assert!(tiny([true, false], [Some(vec![0, 0, 0, 0]), None]).validate().is_err());
        assert!(tiny([true, false], [Some(vec![0, 2, 0, 0]), None]).validate().is_err());
    }

    #[test]
    fn tensors_scale_and_flip() {
        let e = tiny([false, false], [None, None]);
        let t = e.image_tensor();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert!((t.data()[1] - 128.0 / 255.0).abs() < 1e-15);
        let f = e.image_tensor_flipped();
        assert_eq!(f.data()[0], 128.0 / 255.0);
        assert_eq!(f.data()[1], 0.0);
        assert_eq!(f.data()[2], 64.0 / 255.0);
    }

    #[test]
    fn mask_plane_defaults_to_zeros() {
        let e = tiny([true, false], [Some(vec![0, 1, 1, 0]), None]);
        assert_eq!(e.mask_plane(0).data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(e.mask_plane(1).data(), &[0.0; 4]);
        assert_eq!(e.mask_area(0), 2);
        assert_eq!(e.mask_area(1), 0);
    }

    #[test]
    fn split_partitions() {
        let pos = tiny([true, false], [Some(vec![1, 0, 0, 0]), None]);
        let neg = tiny([false, false], [None, None]);
        let ds = Dataset::new(vec![pos, neg.clone(), neg]).unwrap();
        assert_eq!(ds.positives(), vec![0]);
        assert_eq!(ds.negatives(), vec![1, 2]);
    }
}
