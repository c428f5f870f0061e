use crate::backbone::BackboneParams;
use crate::error::Result;
use crate::head::{extract_descriptor, HeadParams, Pooling};
use crate::imaging::{test_preprocess, PreprocessConfig};
use crate::numerics::{Scalar, Tensor};

/// Frozen backbone, trainable head and the preprocessing they were trained with.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub backbone: BackboneParams<T>,
    pub head: HeadParams<T>,
    pub preprocess: PreprocessConfig,
    /// Pooling used in training and, by default, at extraction.
    pub pooling: Pooling,
}

impl<T: Scalar> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone && self.head == other.head && self.preprocess == other.preprocess
            && self.pooling == other.pooling
    }
}

impl<T: Scalar> Model<T> {
    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    /// Test-style preprocessing at `crop`, then a unit-norm descriptor.
    pub fn describe(&self, raw: &Tensor<T>, crop: usize, pooling: Pooling) -> Result<Tensor<T>> {
        let img = test_preprocess(raw, crop, &self.preprocess)?;
        extract_descriptor(&self.backbone, &self.head, &img, pooling)
    }
}
