use std::collections::HashSet;
use std::path::Path;

use crate::binio::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::tensor::normalize_in_place;
use crate::numerics::{norm, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"DSC1";
const VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-4;

/// `N × D` descriptors with aligned ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet<T> {
    ids: Vec<String>,
    vectors: Tensor<T>,
    normalized: bool,
    pub model_tag: String,
}

impl<T: Scalar> DescriptorSet<T> {
    /// Checks id count and uniqueness; when `normalized` is set every row must be unit norm.
    pub fn new(ids: Vec<String>, vectors: Tensor<T>, normalized: bool, model_tag: impl Into<String>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(Error::Dimension(format!(
                "{} ids for descriptor matrix {:?}",
                ids.len(),
                vectors.shape()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate descriptor id {dup:?}")));
        }
        if normalized {
            for (i, id) in ids.iter().enumerate() {
                let n = norm(vectors.row(i)).as_f64();
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::Data(format!("row {id:?} has norm {n}, flagged normalized")));
                }
            }
        }
        Ok(Self {
            ids,
            vectors,
            normalized,
            model_tag: model_tag.into(),
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.vectors.row(i)
    }

    /// Row-wise L2 normalization; sets the normalized flag.
    pub fn normalized(&self) -> Self {
        let mut vectors = self.vectors.clone();
        for i in 0..vectors.rows() {
            normalize_in_place(vectors.row_mut(i), T::of(1e-12));
        }
        Self {
            ids: self.ids.clone(),
            vectors,
            normalized: true,
            model_tag: self.model_tag.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.len() as u32);
        w.u32(self.dim() as u32);
        w.u8(self.normalized as u8);
        w.f32s(self.vectors.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        for id in &self.ids {
            w.str(id);
        }
        w.str(&self.model_tag);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "descriptor file");
        r.expect(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("descriptor file version {version} unsupported")));
        }
        let (n, d) = (r.usize()?, r.usize()?);
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad normalized flag {f}"))),
        };
        let data = r.f32s(n * d)?.into_iter().map(|v| T::of(v as f64)).collect();
        let ids = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let tag = r.str()?;
        r.finish()?;
        Self::new(ids, Tensor::from_vec(&[n, d], data)?, normalized, tag)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// L2-normalize both sets, then concatenate row-wise. Rows end up with norm √2.
pub fn ensemble_concat<T: Scalar>(a: &DescriptorSet<T>, b: &DescriptorSet<T>) -> Result<DescriptorSet<T>> {
    if let Some(row) = (0..a.len().max(b.len())).find(|&i| a.ids.get(i) != b.ids.get(i)) {
        return Err(Error::Alignment {
            row,
            left: a.ids.get(row).cloned().unwrap_or_else(|| "<end>".into()),
            right: b.ids.get(row).cloned().unwrap_or_else(|| "<end>".into()),
        });
    }
    let (a, b) = (a.normalized(), b.normalized());
    let d = a.dim() + b.dim();
    let mut data = Vec::with_capacity(a.len() * d);
    for i in 0..a.len() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    DescriptorSet::new(
        a.ids.clone(),
        Tensor::from_vec(&[a.len(), d], data)?,
        false,
        format!("concat[{}|{}]", a.model_tag, b.model_tag),
    )
}
