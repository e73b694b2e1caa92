//! Procedural datasets, IDX encoding and severity-graded corruptions.

mod corrupt;
mod idx;
mod shapes;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt, occlusion_side, CorruptionKind, CorruptionSpec};
pub use idx::{decode_idx, encode_idx_images, encode_idx_labels, IDX_COLOR_IMAGES_MAGIC, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use shapes::{gen_shapes, gen_shapes_kinds, ShapeKind};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::zoo::InputShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            num_classes,
            name: name.into(),
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: s.to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        if s[0] != self.labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                s[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Consistency(String::from("pixel outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape::new(s[1], s[2], s[3])
    }

    pub fn images_as<T: Scalar>(&self) -> Tensor<T> {
        self.images.cast()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            split: self.split,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
