//! Additive angular margin softmax loss.
//!
//! Embeddings and classifier rows are both L2-normalized; logits are `s·cos θⱼ`
//! except the target, which becomes `s·cos(θ_y + m)`. Once `θ_y + m` would pass π
//! the target logit switches to the linear fallback `s·(cos θ_y − m·sin m)`.

use crate::error::{Error, Result};
use crate::numerics::tensor::normalize_in_place;
use crate::numerics::{dot, Scalar, Tensor};

pub const DEFAULT_COS_EPS: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcMarginConfig {
    pub scale: f64,
    /// Additive angle in radians.
    pub margin: f64,
    pub cos_eps: f64,
}

impl Default for ArcMarginConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.15,
            cos_eps: DEFAULT_COS_EPS,
        }
    }
}

impl ArcMarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("arcmargin scale {} must be > 0", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!(
                "arcmargin margin {} outside [0, π/2)",
                self.margin
            )));
        }
        if !(self.cos_eps > 0.0 && self.cos_eps < 1.0) {
            return Err(Error::Config(format!("cos clamp eps {} outside (0, 1)", self.cos_eps)));
        }
        Ok(())
    }

    /// `cos(π − m)`: target cosines at or below this take the fallback branch.
    pub fn threshold(&self) -> f64 {
        (std::f64::consts::PI - self.margin).cos()
    }

    /// Margin-adjusted target cosine and its derivative with respect to `cos θ`.
    pub fn target_cos<T: Scalar>(&self, c: T) -> (T, T) {
        let (sin_m, cos_m) = self.margin.sin_cos();
        let (sin_m, cos_m) = (T::of(sin_m), T::of(cos_m));
        if c > T::of(self.threshold()) {
            let sin_t = (T::one() - c * c).max(T::zero()).sqrt();
            let value = c * cos_m - sin_t * sin_m;
            let deriv = cos_m + c * sin_m / sin_t;
            (value, deriv)
        } else {
            (c - T::of(self.margin) * sin_m, T::one())
        }
    }
}

/// Intermediates kept for [`arcmargin_backward`].
#[derive(Clone, Debug)]
pub struct ArcCache<T> {
    pub labels: Vec<usize>,
    /// `B × D`, unit rows.
    pub e_hat: Tensor<T>,
    pub e_norm: Vec<T>,
    /// `K × D`, unit rows.
    pub w_hat: Tensor<T>,
    pub w_norm: Vec<T>,
    /// Clamped cosines, `B × K`.
    pub cos: Tensor<T>,
    /// Whether each cosine sits strictly inside the clamp window.
    pub cos_free: Vec<bool>,
    /// `∂φ/∂cos` for each sample's target class.
    pub target_slope: Vec<T>,
    /// Softmax probabilities, `B × K`.
    pub probs: Tensor<T>,
    pub scale: T,
}

#[derive(Clone, Debug)]
pub struct ArcOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// `B × K`.
    pub logits: Tensor<T>,
    pub cache: ArcCache<T>,
}

pub fn arcmargin_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    w_cls: &Tensor<T>,
    cfg: &ArcMarginConfig,
) -> Result<ArcOutput<T>> {
    cfg.validate()?;
    let (batch, dim) = (embeddings.rows(), embeddings.cols());
    let classes = w_cls.rows();
    if embeddings.shape().len() != 2 || w_cls.shape() != [classes, dim] {
        return Err(Error::Dimension(format!(
            "embeddings {:?} vs classifier {:?}",
            embeddings.shape(),
            w_cls.shape()
        )));
    }
    if labels.len() != batch {
        return Err(Error::Data(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
    }

    let eps = T::of(NORM_EPS);
    let mut e_hat = embeddings.clone();
    let e_norm: Vec<T> = (0..batch).map(|b| normalize_in_place(e_hat.row_mut(b), eps)).collect();
    let mut w_hat = w_cls.clone();
    let w_norm: Vec<T> = (0..classes).map(|k| normalize_in_place(w_hat.row_mut(k), eps)).collect();

    let (lo, hi) = (T::of(-1.0 + cfg.cos_eps), T::of(1.0 - cfg.cos_eps));
    let s = T::of(cfg.scale);
    let mut cos = Tensor::zeros(&[batch, classes]);
    let mut cos_free = vec![true; batch * classes];
    let mut logits = Tensor::zeros(&[batch, classes]);
    let mut probs = Tensor::zeros(&[batch, classes]);
    let mut target_slope = Vec::with_capacity(batch);
    let mut total = T::zero();

    for b in 0..batch {
        let y = labels[b];
        for k in 0..classes {
            let raw = dot(e_hat.row(b), w_hat.row(k));
            // NaN must survive the clamp so divergence stays visible in the loss.
            let c = if raw.is_nan() { raw } else { raw.max(lo).min(hi) };
            cos_free[b * classes + k] = raw > lo && raw < hi;
            cos.row_mut(b)[k] = c;
            logits.row_mut(b)[k] = s * c;
        }
        let (phi, slope) = cfg.target_cos(cos.row(b)[y]);
        logits.row_mut(b)[y] = s * phi;
        target_slope.push(slope);

        let z = logits.row(b);
        let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (p, &zk) in probs.row_mut(b).iter_mut().zip(z) {
            *p = (zk - zmax).exp();
            denom += *p;
        }
        for p in probs.row_mut(b) {
            *p /= denom;
        }
        total += zmax + denom.ln() - z[y];
    }

    Ok(ArcOutput {
        loss: total / T::of(batch as f64),
        logits,
        cache: ArcCache {
            labels: labels.to_vec(),
            e_hat,
            e_norm,
            w_hat,
            w_norm,
            cos,
            cos_free,
            target_slope,
            probs,
            scale: s,
        },
    })
}

/// Gradients of the mean loss with respect to the raw embeddings and classifier rows.
pub fn arcmargin_backward<T: Scalar>(cache: &ArcCache<T>) -> (Tensor<T>, Tensor<T>) {
    let (batch, classes) = (cache.probs.rows(), cache.probs.cols());
    let dim = cache.e_hat.cols();
    let inv_batch = T::one() / T::of(batch as f64);

    // ∂L/∂cos
    let mut dcos = Tensor::zeros(&[batch, classes]);
    for b in 0..batch {
        let y = cache.labels[b];
        for k in 0..classes {
            let mut g = cache.probs.row(b)[k];
            if k == y {
                g -= T::one();
            }
            g *= cache.scale * inv_batch;
            if k == y {
                g *= cache.target_slope[b];
            }
            if !cache.cos_free[b * classes + k] {
                g = T::zero();
            }
            dcos.row_mut(b)[k] = g;
        }
    }

    let mut d_e_hat = Tensor::zeros(&[batch, dim]);
    let mut d_w_hat = Tensor::zeros(&[classes, dim]);
    for b in 0..batch {
        for k in 0..classes {
            let g = dcos.row(b)[k];
            if g == T::zero() {
                continue;
            }
            for ((de, dw), (&e, &w)) in d_e_hat
                .row_mut(b)
                .iter_mut()
                .zip(d_w_hat.row_mut(k).iter_mut())
                .zip(cache.e_hat.row(b).iter().zip(cache.w_hat.row(k)))
            {
                *de += g * w;
                *dw += g * e;
            }
        }
    }

    (
        project_rows(&d_e_hat, &cache.e_hat, &cache.e_norm),
        project_rows(&d_w_hat, &cache.w_hat, &cache.w_norm),
    )
}

/// Backpropagates through `x ↦ x/‖x‖`: `(I − x̂x̂ᵀ)·g / ‖x‖` row by row.
fn project_rows<T: Scalar>(grad_hat: &Tensor<T>, unit: &Tensor<T>, norms: &[T]) -> Tensor<T> {
    let mut out = grad_hat.clone();
    for (r, &n) in norms.iter().enumerate() {
        let along = dot(grad_hat.row(r), unit.row(r));
        for (o, &u) in out.row_mut(r).iter_mut().zip(unit.row(r)) {
            *o = (*o - along * u) / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_diff_grad, SeededRng};

    fn rand(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn margin_free_is_plain_softmax_over_cosines() {
        let mut rng = SeededRng::new(1, "arc-m0");
        let e = rand(&[3, 4], &mut rng);
        let w = rand(&[5, 4], &mut rng);
        let labels = [0, 3, 4];
        let cfg = ArcMarginConfig {
            scale: 1.0,
            margin: 0.0,
            ..Default::default()
        };
        let out = arcmargin_loss(&e, &labels, &w, &cfg).unwrap();
        let eh = crate::numerics::l2_normalize_rows(&e, 1e-12);
        let wh = crate::numerics::l2_normalize_rows(&w, 1e-12);
        let mut want = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = (0..5).map(|k| dot(eh.row(b), wh.row(k))).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - z[y];
        }
        want /= 3.0;
        assert!((out.loss - want).abs() < 1e-12);

        // dlogits = softmax − one_hot
        let (de, _) = arcmargin_backward(&out.cache);
        assert!(de.is_finite());
        for b in 0..3 {
            for k in 0..5 {
                let onehot = (k == labels[b]) as u8 as f64;
                let dz = out.cache.probs.row(b)[k] - onehot;
                let softmax = out.logits.row(b).iter().map(|v| v.exp()).sum::<f64>();
                assert!((out.cache.probs.row(b)[k] - out.logits.row(b)[k].exp() / softmax).abs() < 1e-12);
                assert!(dz.abs() <= 1.0);
            }
        }
    }

    #[test]
    fn saturated_two_class_example() {
        // ê = ŵ_0 (cos clamped to 1−ε), other class orthogonal.
        let e = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = ArcMarginConfig::default();
        let out = arcmargin_loss(&e, &[0], &w, &cfg).unwrap();
        let target = out.logits.row(0)[0];
        let c = 1.0 - DEFAULT_COS_EPS;
        let exact = 30.0 * (c * 0.15f64.cos() - (1.0 - c * c).sqrt() * 0.15f64.sin());
        assert!((target - exact).abs() < 1e-12);
        // The clamp costs s·sqrt(2ε)·sin m ≈ 0.002 against the unclamped 30·cos 0.15.
        assert!((30.0 * 0.15f64.cos() - 29.6631).abs() < 1e-4);
        assert!((target - 29.6631).abs() < 2.5e-3, "{target}");
        let want = (-target).exp().ln_1p();
        assert!((out.loss / want - 1.0).abs() < 1e-2);
        assert!(out.loss > 1.2e-13 && out.loss < 1.4e-13, "{}", out.loss);
    }

    #[test]
    fn fallback_branch_on_opposed_target() {
        let e = Tensor::from_vec(&[1, 2], vec![-1.0f64, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = ArcMarginConfig {
            margin: 0.35,
            ..Default::default()
        };
        let out = arcmargin_loss(&e, &[0], &w, &cfg).unwrap();
        let c = -1.0 + DEFAULT_COS_EPS;
        let want = 30.0 * (c - 0.35 * 0.35f64.sin());
        assert!((out.logits.row(0)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn branch_switch_gap_is_second_order_in_margin() {
        // Margin branch reaches −1 at cos θ = −cos m; the fallback line lands at
        // −cos m − m·sin m. The jump equals cos m + m·sin m − 1 ≤ m²/2.
        for m in [0.15, 0.25, 0.35] {
            let cfg = ArcMarginConfig {
                margin: m,
                ..Default::default()
            };
            let t = cfg.threshold();
            let (above, _) = cfg.target_cos(t + 1e-12);
            let (below, _) = cfg.target_cos(t);
            assert!((above + 1.0).abs() < 1e-5);
            let gap = above - below;
            assert!((gap - (m.cos() + m * m.sin() - 1.0)).abs() < 1e-5);
            assert!(gap > 0.0 && gap <= m * m / 2.0);
            // Both sides stay monotone in cos θ near the switch.
            let (_, slope_above) = cfg.target_cos(t + 1e-3);
            let (_, slope_below) = cfg.target_cos(t - 1e-3);
            assert!(slope_above > 0.0 && slope_below > 0.0);
        }
    }

    #[test]
    fn label_out_of_range() {
        let e = Tensor::<f64>::full(&[1, 2], 1.0);
        let w = Tensor::<f64>::full(&[2, 2], 1.0);
        assert!(matches!(
            arcmargin_loss(&e, &[2], &w, &ArcMarginConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn row_scaling_of_classifier_is_invisible() {
        let mut rng = SeededRng::new(8, "arc-scale");
        let e = rand(&[4, 6], &mut rng);
        let w = rand(&[5, 6], &mut rng);
        let labels = [1, 0, 4, 2];
        let cfg = ArcMarginConfig::default();
        let base = arcmargin_loss(&e, &labels, &w, &cfg).unwrap();
        let mut w2 = w.clone();
        for (k, c) in [0.3, 7.0, 1.0, 0.01, 2.5].iter().enumerate() {
            w2.row_mut(k).iter_mut().for_each(|v| *v *= c);
        }
        let scaled = arcmargin_loss(&e, &labels, &w2, &cfg).unwrap();
        assert!((base.loss - scaled.loss).abs() < 1e-6);
        assert!(base.logits.max_abs_diff(&scaled.logits) < 1e-6);
        assert!(base.cache.cos.max_abs_diff(&scaled.cache.cos) < 1e-6);
    }

    #[test]
    fn loss_grows_with_margin() {
        let mut rng = SeededRng::new(3, "arc-mono");
        for _ in 0..20 {
            let e = rand(&[4, 6], &mut rng);
            let w = rand(&[5, 6], &mut rng);
            let labels = [0, 1, 2, 3];
            let losses: Vec<f64> = [0.15, 0.25, 0.35]
                .iter()
                .map(|&m| {
                    let cfg = ArcMarginConfig {
                        margin: m,
                        ..Default::default()
                    };
                    arcmargin_loss(&e, &labels, &w, &cfg).unwrap().loss
                })
                .collect();
            assert!(losses[0] <= losses[1] && losses[1] <= losses[2], "{losses:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(77, "arc-fd");
        for _ in 0..10 {
            let e = rand(&[4, 8], &mut rng);
            let w = rand(&[5, 8], &mut rng);
            let labels = [4, 0, 2, 2];
            let cfg = ArcMarginConfig {
                scale: rng.uniform_in(1.0, 30.0),
                margin: rng.uniform_in(0.0, 0.5),
                ..Default::default()
            };
            let out = arcmargin_loss(&e, &labels, &w, &cfg).unwrap();
            let (de, dw) = arcmargin_backward(&out.cache);
            let ne = central_diff_grad(|t| arcmargin_loss(t, &labels, &w, &cfg).unwrap().loss, &e, 1e-4).unwrap();
            let nw = central_diff_grad(|t| arcmargin_loss(&e, &labels, t, &cfg).unwrap().loss, &w, 1e-4).unwrap();
            for (a, n) in de.data().iter().zip(ne.data()).chain(dw.data().iter().zip(nw.data())) {
                assert!((a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
            }
        }
    }
}
