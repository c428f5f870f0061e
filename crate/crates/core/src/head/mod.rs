//! Trainable head: GeM pooling → affine embedding → additive angular margin classifier.

mod arcmargin;
mod gem;

pub use arcmargin::{arcmargin_backward, arcmargin_loss, ArcCache, ArcMarginConfig, ArcOutput, DEFAULT_COS_EPS};
pub use gem::{gem_pool, gem_pool_grad};

use std::fmt;
use std::str::FromStr;

use crate::backbone::{BackboneParams, FeatureMap};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, Scalar, SeededRng, Tensor};
use gem::{gem_channels, GemChannel};

pub const GEM_P_MIN: f64 = 1.0;
pub const GEM_P_MAX: f64 = 12.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Gem,
    /// Global average pooling, i.e. GeM with `p` pinned to 1.
    Gap,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Gem => "gem",
            Pooling::Gap => "gap",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gem" => Ok(Pooling::Gem),
            "gap" => Ok(Pooling::Gap),
            other => Err(Error::Config(format!("unknown pooling {other:?} (gem|gap)"))),
        }
    }
}

/// Parameters updated by training.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub gem_p: T,
    /// `D × C`.
    pub w_emb: Tensor<T>,
    /// `D`.
    pub b_emb: Tensor<T>,
    /// `K × D`.
    pub w_cls: Tensor<T>,
    generation: u64,
}

/// Equality ignores the cache generation counter.
impl<T: Scalar> PartialEq for HeadParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.gem_p == other.gem_p
            && self.w_emb == other.w_emb
            && self.b_emb == other.b_emb
            && self.w_cls == other.w_cls
    }
}

impl<T: Scalar> HeadParams<T> {
    /// `W_emb ~ N(0, 1)`, zero bias, `W_cls ~ N(0, 1/D)`.
    ///
    /// Both losses see only directions, so the effective step on a parameter shrinks with
    /// its norm squared. Pooled features are small (entries near 0.1), which with a
    /// `1/C` embedding scale leaves `‖e‖` below one and lets the unscaled bias gradient
    /// swamp the embedding within one epoch at lr 0.01.
    pub fn init(seed: u64, channels: usize, embed_dim: usize, classes: usize, gem_p: f64) -> Result<Self> {
        if channels == 0 || embed_dim == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "invalid head dims C={channels} D={embed_dim} K={classes}"
            )));
        }
        let mut rng = SeededRng::new(seed, "head/init");
        let w_emb = Tensor::from_fn(&[embed_dim, channels], |_| T::of(rng.normal()));
        let std = (1.0 / embed_dim as f64).sqrt();
        let w_cls = Tensor::from_fn(&[classes, embed_dim], |_| T::of(std * rng.normal()));
        Self::from_parts(T::of(gem_p), w_emb, Tensor::zeros(&[embed_dim]), w_cls)
    }

    pub fn from_parts(gem_p: T, w_emb: Tensor<T>, b_emb: Tensor<T>, w_cls: Tensor<T>) -> Result<Self> {
        let (d, c) = (w_emb.rows(), w_emb.cols());
        if w_emb.shape() != [d, c] || b_emb.shape() != [d] || w_cls.shape() != [w_cls.rows(), d] {
            return Err(Error::Dimension(format!(
                "head tensors W_emb {:?}, b_emb {:?}, W_cls {:?}",
                w_emb.shape(),
                b_emb.shape(),
                w_cls.shape()
            )));
        }
        Ok(Self {
            gem_p,
            w_emb,
            b_emb,
            w_cls,
            generation: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_emb.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_emb.rows()
    }

    pub fn classes(&self) -> usize {
        self.w_cls.rows()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Invalidates every outstanding [`ForwardCache`]. Called by each optimizer step.
    pub fn mark_modified(&mut self) {
        self.generation += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.gem_p.is_finite() && self.w_emb.is_finite() && self.b_emb.is_finite() && self.w_cls.is_finite()
    }

    fn effective_p(&self, pooling: Pooling) -> T {
        match pooling {
            Pooling::Gem => self.gem_p,
            Pooling::Gap => T::one(),
        }
    }
}

/// `e = W_emb·v + b_emb`.
pub fn embed_forward<T: Scalar>(v: &[T], w_emb: &Tensor<T>, b_emb: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, c) = (w_emb.rows(), w_emb.cols());
    if v.len() != c || b_emb.len() != d {
        return Err(Error::Dimension(format!(
            "embedding input {} / bias {:?} against weights {:?}",
            v.len(),
            b_emb.shape(),
            w_emb.shape()
        )));
    }
    let out = (0..d).map(|i| dot(w_emb.row(i), v) + b_emb.data()[i]).collect();
    Tensor::from_vec(&[d], out)
}

/// Everything [`head_backward`] needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    generation: u64,
    pooling: Pooling,
    p: T,
    /// `B × C`.
    pub pooled: Tensor<T>,
    gem: Vec<GemChannel<T>>,
    /// Pre-normalization embeddings, `B × D`.
    pub embeddings: Tensor<T>,
    pub arc: ArcCache<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads<T> {
    pub gem_p: T,
    pub w_emb: Tensor<T>,
    pub b_emb: Tensor<T>,
    pub w_cls: Tensor<T>,
    /// Per-sample `∂L/∂e`, `B × D`.
    pub embeddings: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub cache: ForwardCache<T>,
}

/// Pools and embeds a batch of feature maps, returning `(B × C pooled, B × D embeddings, stats)`.
fn pool_and_embed<T: Scalar>(
    params: &HeadParams<T>,
    features: &[FeatureMap<T>],
    pooling: Pooling,
) -> Result<(Tensor<T>, Tensor<T>, Vec<GemChannel<T>>)> {
    if features.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let (c, d) = (params.channels(), params.embed_dim());
    let p = params.effective_p(pooling);
    let mut pooled = Vec::with_capacity(features.len() * c);
    let mut stats = Vec::with_capacity(features.len() * c);
    for f in features {
        if f.channels() != c {
            return Err(Error::Dimension(format!(
                "feature map has {} channels, head expects {c}",
                f.channels()
            )));
        }
        let ch = gem_channels(f, p)?;
        pooled.extend(ch.iter().map(|s| s.out));
        stats.extend(ch);
    }
    let pooled = Tensor::from_vec(&[features.len(), c], pooled)?;
    let mut emb = Vec::with_capacity(features.len() * d);
    for b in 0..features.len() {
        emb.extend_from_slice(embed_forward(pooled.row(b), &params.w_emb, &params.b_emb)?.data());
    }
    Ok((pooled, Tensor::from_vec(&[features.len(), d], emb)?, stats))
}

pub fn head_forward<T: Scalar>(
    params: &HeadParams<T>,
    features: &[FeatureMap<T>],
    labels: &[usize],
    cfg: &ArcMarginConfig,
    pooling: Pooling,
) -> Result<HeadOutput<T>> {
    let (pooled, embeddings, gem) = pool_and_embed(params, features, pooling)?;
    let arc = arcmargin_loss(&embeddings, labels, &params.w_cls, cfg)?;
    Ok(HeadOutput {
        loss: arc.loss,
        logits: arc.logits,
        cache: ForwardCache {
            generation: params.generation,
            pooling,
            p: params.effective_p(pooling),
            pooled,
            gem,
            embeddings,
            arc: arc.cache,
        },
    })
}

/// Exact gradients of the mean loss for every head parameter.
///
/// Fails with a usage error when `params` changed since the forward call or the
/// labels differ from the ones the cache was built with.
pub fn head_backward<T: Scalar>(
    params: &HeadParams<T>,
    cache: &ForwardCache<T>,
    labels: &[usize],
) -> Result<HeadGrads<T>> {
    if cache.generation != params.generation {
        return Err(Error::Usage(format!(
            "stale forward cache (generation {} vs parameters {})",
            cache.generation, params.generation
        )));
    }
    if cache.arc.labels != labels {
        return Err(Error::Usage("labels differ from the forward call".into()));
    }
    let (d_e, d_w_cls) = arcmargin_backward(&cache.arc);
    let (batch, c, d) = (cache.pooled.rows(), params.channels(), params.embed_dim());

    let mut d_w_emb = Tensor::zeros(&[d, c]);
    let mut d_b = Tensor::zeros(&[d]);
    let mut d_p = T::zero();
    let mut d_v = vec![T::zero(); c];
    for b in 0..batch {
        let (ge, v) = (d_e.row(b), cache.pooled.row(b));
        for i in 0..d {
            let g = ge[i];
            d_b.data_mut()[i] += g;
            for (w, &x) in d_w_emb.row_mut(i).iter_mut().zip(v) {
                *w += g * x;
            }
        }
        if cache.pooling == Pooling::Gem {
            d_v.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..d {
                let g = ge[i];
                for (dv, &w) in d_v.iter_mut().zip(params.w_emb.row(i)) {
                    *dv += g * w;
                }
            }
            for (dv, s) in d_v.iter().zip(&cache.gem[b * c..(b + 1) * c]) {
                d_p += *dv * s.dp(cache.p);
            }
        }
    }
    Ok(HeadGrads {
        gem_p: d_p,
        w_emb: d_w_emb,
        b_emb: d_b,
        w_cls: d_w_cls,
        embeddings: d_e,
    })
}

/// Unit-norm global descriptor for one preprocessed image.
pub fn extract_descriptor<T: Scalar>(
    backbone: &BackboneParams<T>,
    head: &HeadParams<T>,
    img: &Tensor<T>,
    pooling: Pooling,
) -> Result<Tensor<T>> {
    let f = backbone.extract_features(img)?;
    let (_, e, _) = pool_and_embed(head, std::slice::from_ref(&f), pooling)?;
    let d = e.cols();
    l2_normalize_rows(&e, T::of(1e-12)).reshape(&[d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_diff_grad, norm, matmul};

    fn rand_features(n: usize, c: usize, rng: &mut SeededRng) -> Vec<FeatureMap<f64>> {
        (0..n)
            .map(|_| {
                let t = Tensor::from_fn(&[c, 3, 3], |_| rng.uniform_in(0.05, 1.5));
                FeatureMap::new(t).unwrap()
            })
            .collect()
    }

    #[test]
    fn embed_examples() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let e = embed_forward(&[4.0, 5.0, 6.0], &w, &b).unwrap();
        assert_eq!(e.data(), &[4.0, 5.0]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        assert_eq!(embed_forward(&[0.0; 3], &w, &b).unwrap().data(), &[0.5, -1.0]);
        assert!(embed_forward(&[0.0; 2], &w, &b).is_err());
    }

    #[test]
    fn embed_matches_matmul() {
        let mut rng = SeededRng::new(10, "embed");
        let w = Tensor::from_fn(&[5, 7], |_| rng.normal());
        let v = Tensor::from_fn(&[7, 1], |_| rng.normal());
        let b = Tensor::from_fn(&[5], |_| rng.normal());
        let e = embed_forward(v.data(), &w, &b).unwrap();
        let m = matmul(&w, &v).unwrap();
        for i in 0..5 {
            assert!((e.data()[i] - (m.data()[i] + b.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = SeededRng::new(1, "stale");
        let mut params = HeadParams::<f64>::init(1, 4, 3, 2, 3.0).unwrap();
        let feats = rand_features(2, 4, &mut rng);
        let out = head_forward(&params, &feats, &[0, 1], &ArcMarginConfig::default(), Pooling::Gem).unwrap();
        assert!(head_backward(&params, &out.cache, &[0, 1]).is_ok());
        assert!(matches!(head_backward(&params, &out.cache, &[1, 1]), Err(Error::Usage(_))));
        params.mark_modified();
        assert!(matches!(head_backward(&params, &out.cache, &[0, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn duplicate_samples_get_identical_gradients() {
        let mut rng = SeededRng::new(2, "dup");
        let params = HeadParams::<f64>::init(2, 5, 4, 3, 2.5).unwrap();
        let mut feats = rand_features(3, 5, &mut rng);
        feats[2] = feats[0].clone();
        let labels = [1, 2, 1];
        let out = head_forward(&params, &feats, &labels, &ArcMarginConfig::default(), Pooling::Gem).unwrap();
        let g = head_backward(&params, &out.cache, &labels).unwrap();
        assert_eq!(g.embeddings.row(0), g.embeddings.row(2));
    }

    #[test]
    fn full_head_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(5, "head-fd");
        let (c, d, k) = (6, 4, 3);
        for _ in 0..5 {
            let params = HeadParams::<f64>::init(rng.next_u64(), c, d, k, rng.uniform_in(1.5, 5.0)).unwrap();
            let mut params = params;
            params.b_emb = Tensor::from_fn(&[d], |_| 0.1 * rng.normal());
            let feats = rand_features(3, c, &mut rng);
            let labels = [0, 2, 1];
            let cfg = ArcMarginConfig {
                scale: 8.0,
                margin: 0.25,
                ..Default::default()
            };
            let out = head_forward(&params, &feats, &labels, &cfg, Pooling::Gem).unwrap();
            let g = head_backward(&params, &out.cache, &labels).unwrap();
            let loss = |p: &HeadParams<f64>| head_forward(p, &feats, &labels, &cfg, Pooling::Gem).unwrap().loss;
            let check = |a: &Tensor<f64>, n: &Tensor<f64>| {
                for (x, y) in a.data().iter().zip(n.data()) {
                    assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3), "{x} vs {y}");
                }
            };
            let n = central_diff_grad(|t| loss(&HeadParams { w_emb: t.clone(), ..params.clone() }), &params.w_emb, 1e-4).unwrap();
            check(&g.w_emb, &n);
            let n = central_diff_grad(|t| loss(&HeadParams { b_emb: t.clone(), ..params.clone() }), &params.b_emb, 1e-4).unwrap();
            check(&g.b_emb, &n);
            let n = central_diff_grad(|t| loss(&HeadParams { w_cls: t.clone(), ..params.clone() }), &params.w_cls, 1e-4).unwrap();
            check(&g.w_cls, &n);
            let pt = Tensor::from_vec(&[1], vec![params.gem_p]).unwrap();
            let n = central_diff_grad(|t| loss(&HeadParams { gem_p: t.data()[0], ..params.clone() }), &pt, 1e-4).unwrap();
            check(&Tensor::from_vec(&[1], vec![g.gem_p]).unwrap(), &n);
        }
    }

    #[test]
    fn gap_pooling_has_no_exponent_gradient() {
        let mut rng = SeededRng::new(6, "gap");
        let params = HeadParams::<f64>::init(6, 4, 3, 2, 3.0).unwrap();
        let feats = rand_features(2, 4, &mut rng);
        let out = head_forward(&params, &feats, &[0, 1], &ArcMarginConfig::default(), Pooling::Gap).unwrap();
        let g = head_backward(&params, &out.cache, &[0, 1]).unwrap();
        assert_eq!(g.gem_p, 0.0);
        for (b, f) in feats.iter().enumerate() {
            for ch in 0..4 {
                let mean = f.channel(ch).iter().sum::<f64>() / 9.0;
                assert!((out.cache.pooled.row(b)[ch] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn descriptor_is_unit_deterministic_and_scale_free() {
        let mut rng = SeededRng::new(7, "desc");
        let bb = BackboneParams::<f64>::init(3, 4, 4, 8).unwrap();
        let mut head = HeadParams::<f64>::init(4, 8, 5, 3, 3.0).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform_in(-0.5, 0.5));
        for pooling in [Pooling::Gem, Pooling::Gap] {
            let d = extract_descriptor(&bb, &head, &img, pooling).unwrap();
            assert!((norm(d.data()) - 1.0).abs() < 1e-6);
            assert_eq!(d, extract_descriptor(&bb, &head, &img, pooling).unwrap());
        }
        let d1 = extract_descriptor(&bb, &head, &img, Pooling::Gem).unwrap();
        head.w_emb = head.w_emb.scale(3.7);
        let d2 = extract_descriptor(&bb, &head, &img, Pooling::Gem).unwrap();
        assert!(d1.max_abs_diff(&d2) < 1e-12);
    }

    #[test]
    fn pooling_parses() {
        assert_eq!("gem".parse::<Pooling>().unwrap(), Pooling::Gem);
        assert_eq!("gap".parse::<Pooling>().unwrap(), Pooling::Gap);
        assert!("max".parse::<Pooling>().is_err());
    }
}
