//! Frozen random-patch feature extractor.
//!
//! Every `P×P` patch (stride `S`) is flattened channel-major, projected onto `C`
//! fixed Gaussian directions and rectified. The projection is a function of the
//! seed alone and is never updated.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub seed: u64,
    pub patch: usize,
    pub stride: usize,
    pub channels: usize,
    /// `C × (3·P·P)`.
    projection: Tensor<T>,
}

/// Rectified feature map, `C×H'×W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "feature map must be C×H×W, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of spatial positions per channel.
    pub fn positions(&self) -> usize {
        self.values.shape()[1] * self.values.shape()[2]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.positions();
        &self.values.data()[c * n..(c + 1) * n]
    }
}

/// Output side `floor((B − P) / S) + 1`.
pub fn output_side(input: usize, patch: usize, stride: usize) -> usize {
    (input - patch) / stride + 1
}

impl<T: Scalar> BackboneParams<T> {
    /// Projection entries are i.i.d. `N(0, 1/(3·P²))`.
    pub fn init(seed: u64, patch: usize, stride: usize, channels: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || stride > patch || channels == 0 {
            return Err(Error::Config(format!(
                "invalid backbone dims P={patch} S={stride} C={channels}"
            )));
        }
        let fan_in = 3 * patch * patch;
        let std = (1.0 / fan_in as f64).sqrt();
        let mut rng = SeededRng::new(seed, "backbone/projection");
        let projection = Tensor::from_fn(&[channels, fan_in], |_| T::of(std * rng.normal()));
        Ok(Self {
            seed,
            patch,
            stride,
            channels,
            projection,
        })
    }

    /// Rebuilds from stored parts, checking the projection shape.
    pub fn from_parts(
        seed: u64,
        patch: usize,
        stride: usize,
        projection: Tensor<T>,
    ) -> Result<Self> {
        let channels = projection.rows();
        if projection.shape() != [channels, 3 * patch * patch] || stride == 0 || stride > patch {
            return Err(Error::Format(format!(
                "backbone projection {:?} inconsistent with P={patch} S={stride}",
                projection.shape()
            )));
        }
        Ok(Self {
            seed,
            patch,
            stride,
            channels,
            projection,
        })
    }

    pub fn projection(&self) -> &Tensor<T> {
        &self.projection
    }

    pub fn extract_features(&self, img: &Tensor<T>) -> Result<FeatureMap<T>> {
        let (h, w) = match img.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::Dimension(format!("expected 3×H×W image, got {s:?}"))),
        };
        let (p, s) = (self.patch, self.stride);
        if h < p || w < p {
            return Err(Error::Dimension(format!(
                "image {h}×{w} smaller than patch {p}"
            )));
        }
        let (oh, ow) = (output_side(h, p, s), output_side(w, p, s));
        let positions = oh * ow;
        let fan_in = 3 * p * p;
        let src = img.data();
        let mut patch = vec![T::zero(); fan_in];
        let mut out = vec![T::zero(); self.channels * positions];
        for y in 0..oh {
            for x in 0..ow {
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        let start = c * h * w + (y * s + dy) * w + x * s;
                        patch[k..k + p].copy_from_slice(&src[start..start + p]);
                        k += p;
                    }
                }
                let pos = y * ow + x;
                for (ch, weights) in self.projection.data().chunks_exact(fan_in).enumerate() {
                    let v = crate::numerics::dot(weights, &patch);
                    out[ch * positions + pos] = v.max(T::zero());
                }
            }
        }
        FeatureMap::new(Tensor::from_vec(&[self.channels, oh, ow], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = BackboneParams::<f32>::init(5, 8, 8, 16).unwrap();
        let b = BackboneParams::<f32>::init(5, 8, 8, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, BackboneParams::init(6, 8, 8, 16).unwrap());
        assert!(BackboneParams::<f32>::init(5, 0, 1, 1).is_err());
        assert!(BackboneParams::<f32>::init(5, 4, 5, 1).is_err());
        assert!(BackboneParams::<f32>::init(5, 4, 2, 0).is_err());
    }

    #[test]
    fn degenerate_per_pixel_projection() {
        let bp = BackboneParams::<f64>::init(1, 1, 1, 1).unwrap();
        let img = Tensor::from_fn(&[3, 4, 4], |i| (i % 5) as f64 / 4.0);
        let f = bp.extract_features(&img).unwrap();
        assert_eq!(f.values.shape(), &[1, 4, 4]);
        let w = bp.projection().data();
        for pos in 0..16 {
            let v = w[0] * img.data()[pos] + w[1] * img.data()[16 + pos] + w[2] * img.data()[32 + pos];
            assert!((f.values.data()[pos] - v.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_variance() {
        let bp = BackboneParams::<f64>::init(3, 4, 4, 2000).unwrap();
        let d = bp.projection().data();
        let var = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        let want = 1.0 / 48.0;
        assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
    }

    #[test]
    fn zero_image_and_shapes() {
        let bp = BackboneParams::<f32>::init(2, 8, 8, 4).unwrap();
        let f = bp.extract_features(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!(f.values.shape(), &[4, 8, 8]);
        assert!(f.values.data().iter().all(|&v| v == 0.0));
        let f = bp.extract_features(&Tensor::zeros(&[3, 128, 128])).unwrap();
        assert_eq!(f.spatial(), (16, 16));
        let f = bp.extract_features(&Tensor::zeros(&[3, 184, 184])).unwrap();
        assert_eq!(f.spatial(), (23, 23));
        assert!(bp.extract_features(&Tensor::zeros(&[3, 7, 7])).is_err());
    }

    #[test]
    fn overlapping_stride_matches_naive() {
        let bp = BackboneParams::<f64>::init(4, 3, 2, 3).unwrap();
        let img = Tensor::from_fn(&[3, 9, 9], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let f = bp.extract_features(&img).unwrap();
        assert_eq!(f.spatial(), (4, 4));
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut acc = 0.0;
                    let mut k = 0;
                    for c in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let px = img.data()[c * 81 + (2 * y + dy) * 9 + 2 * x + dx];
                                acc += bp.projection().data()[ch * 27 + k] * px;
                                k += 1;
                            }
                        }
                    }
                    let got = f.values.data()[ch * 16 + y * 4 + x];
                    assert!((got - acc.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn features_nonnegative(vals in prop::collection::vec(-1.0f32..1.0, 3 * 16 * 16), seed in 0u64..1000) {
            let bp = BackboneParams::<f32>::init(seed, 4, 4, 8).unwrap();
            let img = Tensor::from_vec(&[3, 16, 16], vals).unwrap();
            let f = bp.extract_features(&img).unwrap();
            prop_assert!(f.values.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn grid_grows_with_resolution(b in 8usize..200, extra in 0usize..64) {
            let (p, s) = (8, 8);
            let b2 = b + s + extra;
            prop_assert!(output_side(b2, p, s) > output_side(b, p, s));
        }
    }
}
