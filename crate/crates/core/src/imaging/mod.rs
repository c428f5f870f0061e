//! Synthetic landmark dataset and the train/test image preprocessing paths.

mod manifest;
mod preprocess;
mod synth;

pub use manifest::{synth_dataset, Dataset, DatasetConfig, GroundTruth, Manifest, ManifestRow, Split};
pub use preprocess::{
    bilinear_resize, center_crop, center_offset, channel_mean, flip_horizontal, subtract_mean,
    test_preprocess, train_augment, PreprocessConfig, CROP_RATIO,
};
pub use synth::{
    instance_transform, render_instance, ProtoSpec, RenderOptions, Similarity, SineTerm,
    MIN_RENDER_SIDE, TERMS_PER_CHANNEL,
};

use crate::numerics::Tensor;

/// A rendered manifest row.
#[derive(Clone, Debug)]
pub struct ImageSample<T> {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub pixels: Tensor<T>,
}
