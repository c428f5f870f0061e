//! Descriptor sets, ensembling, brute-force search and mAP@k evaluation.

mod descriptors;
mod eval;
mod search;

pub use descriptors::{ensemble_concat, DescriptorSet};
pub use eval::{ap_at_k, map_at_100, map_at_k, EvalReport, QueryAp};
pub use search::{read_results_csv, search_topk, write_results_csv, RetrievalResult, DEFAULT_K};

use crate::error::{Error, Result};
use crate::head::Pooling;
use crate::imaging::{Dataset, Split};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};

/// Renders every row of `split` at `crop`, applies test preprocessing and extracts
/// unit-norm descriptors. Rows follow manifest order.
pub fn build_descriptor_set<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
    crop: usize,
    pooling: Pooling,
    tag: impl Into<String>,
) -> Result<DescriptorSet<T>> {
    let rows = dataset.manifest.split(split);
    if rows.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let d = model.embed_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut ids = Vec::with_capacity(rows.len());
    for row in rows {
        let raw = dataset.render::<T>(row, crop)?;
        data.extend_from_slice(model.describe(&raw, crop, pooling)?.data());
        ids.push(row.id.clone());
    }
    let n = ids.len();
    DescriptorSet::new(ids, Tensor::from_vec(&[n, d], data)?, true, tag)
}
