use crate::error::{Error, Result};
use crate::numerics::{Scalar, SeededRng, Tensor};

/// Test-time resize-then-crop ratio `B / A`.
pub const CROP_RATIO: f64 = 0.9201;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub crop_ratio: f64,
    /// Dataset-level per-channel mean subtracted from every input.
    pub mean: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop_ratio: CROP_RATIO,
            mean: [0.0; 3],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratio {} outside (0, 1]",
                self.crop_ratio
            )));
        }
        Ok(())
    }

    /// Resize side `A = round(B / ratio)`, rounding halves up.
    pub fn resize_side(&self, crop_side: usize) -> usize {
        (crop_side as f64 / self.crop_ratio + 0.5).floor() as usize
    }
}

fn planar_dims<T: Scalar>(img: &Tensor<T>) -> (usize, usize, usize) {
    match img.shape() {
        &[c, h, w] => (c, h, w),
        s => panic!("expected a C×H×W image, got shape {s:?}"),
    }
}

/// Source index pair and weight for each destination sample along one axis,
/// half-pixel centers (`src = (dst + 0.5)·in/out − 0.5`), edges clamped.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Separable bilinear resize of a `C×H×W` image to `C×A×A`.
pub fn bilinear_resize<T: Scalar>(img: &Tensor<T>, side: usize) -> Tensor<T> {
    assert!(side >= 1);
    let (channels, h, w) = planar_dims(img);
    let cols = bilinear_taps(w, side);
    let rows = bilinear_taps(h, side);
    let src = img.data();
    let mut tmp = vec![0.0f64; h * side];
    let mut out = Vec::with_capacity(channels * side * side);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, &(lo, hi, t)) in cols.iter().enumerate() {
                let (a, b) = (line[lo].as_f64(), line[hi].as_f64());
                tmp[y * side + x] = a + (b - a) * t;
            }
        }
        for &(lo, hi, t) in &rows {
            for x in 0..side {
                let (a, b) = (tmp[lo * side + x], tmp[hi * side + x]);
                out.push(T::of(a + (b - a) * t));
            }
        }
    }
    Tensor::from_vec(&[channels, side, side], out).expect("resize output shape")
}

/// Crops a `crop×crop` window with top-left corner `(top, left)`.
fn crop_at<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, crop: usize) -> Tensor<T> {
    let (channels, h, w) = planar_dims(img);
    debug_assert!(top + crop <= h && left + crop <= w);
    let src = img.data();
    let mut out = Vec::with_capacity(channels * crop * crop);
    for c in 0..channels {
        for y in top..top + crop {
            let start = c * h * w + y * w + left;
            out.extend_from_slice(&src[start..start + crop]);
        }
    }
    Tensor::from_vec(&[channels, crop, crop], out).expect("crop output shape")
}

/// Top-left offset of a centered crop: `floor((A − B) / 2)`.
pub fn center_offset(side: usize, crop: usize) -> usize {
    (side - crop) / 2
}

pub fn center_crop<T: Scalar>(img: &Tensor<T>, crop: usize) -> Result<Tensor<T>> {
    let (_, h, w) = planar_dims(img);
    let side = h.min(w);
    if crop > side || crop == 0 {
        return Err(Error::Crop { crop, side });
    }
    Ok(crop_at(img, center_offset(h, crop), center_offset(w, crop), crop))
}

pub fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let (_, _, w) = planar_dims(img);
    let mut out = img.clone();
    for line in out.data_mut().chunks_mut(w) {
        line.reverse();
    }
    out
}

pub fn subtract_mean<T: Scalar>(img: &mut Tensor<T>, mean: &[f64; 3]) {
    let (channels, h, w) = planar_dims(img);
    let plane = h * w;
    for c in 0..channels {
        let m = T::of(mean[c % 3]);
        for v in &mut img.data_mut()[c * plane..(c + 1) * plane] {
            *v -= m;
        }
    }
}

/// Deterministic inference path: resize to `A = round(B / ratio)`, center-crop `B`, subtract mean.
pub fn test_preprocess<T: Scalar>(
    img: &Tensor<T>,
    crop: usize,
    cfg: &PreprocessConfig,
) -> Result<Tensor<T>> {
    if crop < super::MIN_RENDER_SIDE {
        return Err(Error::Resolution {
            got: crop,
            min: super::MIN_RENDER_SIDE,
        });
    }
    let resized = bilinear_resize(img, cfg.resize_side(crop));
    let mut out = center_crop(&resized, crop)?;
    subtract_mean(&mut out, &cfg.mean);
    Ok(out)
}

/// Training path: random-position crop, horizontal flip with probability 0.5, mean subtraction.
pub fn train_augment<T: Scalar>(
    img: &Tensor<T>,
    crop: usize,
    rng: &mut SeededRng,
    cfg: &PreprocessConfig,
) -> Result<Tensor<T>> {
    let (_, h, w) = planar_dims(img);
    if h < crop || w < crop || crop == 0 {
        return Err(Error::Augmentation {
            source_side: h.min(w),
            crop,
        });
    }
    let top = rng.below(h - crop + 1);
    let left = rng.below(w - crop + 1);
    let mut out = crop_at(img, top, left, crop);
    if rng.bernoulli(0.5) {
        out = flip_horizontal(&out);
    }
    subtract_mean(&mut out, &cfg.mean);
    Ok(out)
}

/// Per-channel mean over a collection of `3×H×W` images.
pub fn channel_mean<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Tensor<T>>) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let (_, h, w) = planar_dims(img);
        let plane = h * w;
        for (c, s) in sums.iter_mut().enumerate() {
            *s += img.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.0; 3];
    }
    sums.map(|s| s / count as f64)
}
