//! Global-descriptor landmark retrieval at desk scale.
//!
//! A frozen random-patch backbone feeds a trainable head (GeM pooling, affine
//! embedding, additive angular margin classifier). Heads are trained in resolution
//! stages with SGD, optionally fine-tuned at test resolution, and evaluated by
//! brute-force top-k search scored with mAP@100.

pub mod backbone;
mod binio;
pub mod config;
pub mod error;
pub mod head;
pub mod imaging;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Model;
pub use numerics::{Scalar, SeededRng, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type DescriptorSet32 = retrieval::DescriptorSet<f32>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
