//! Generalized-mean pooling `out_c = (mean_x x^p)^(1/p)` and its derivatives.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-channel sufficient statistics for the forward value and `∂out/∂p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct GemChannel<T> {
    pub out: T,
    /// `mean x^p`
    pub mean_pow: T,
    /// `mean x^p · ln x`, zero-valued activations contributing 0.
    pub mean_pow_log: T,
}

impl<T: Scalar> GemChannel<T> {
    /// `∂out/∂p = out · (−ln M / p² + L / (p·M))`; zero when the channel is all zeros.
    pub fn dp(&self, p: T) -> T {
        if self.out <= T::zero() || self.mean_pow <= T::zero() {
            return T::zero();
        }
        self.out * (-self.mean_pow.ln() / (p * p) + self.mean_pow_log / (p * self.mean_pow))
    }
}

fn check_domain<T: Scalar>(f: &FeatureMap<T>, p: T) -> Result<()> {
    if !(p >= T::one()) {
        return Err(Error::Config(format!("GeM exponent {p} below 1")));
    }
    if let Some((index, v)) = f.values.data().iter().enumerate().find(|(_, v)| !(**v >= T::zero())) {
        return Err(Error::Domain {
            index,
            value: v.as_f64(),
        });
    }
    Ok(())
}

pub(crate) fn gem_channels<T: Scalar>(f: &FeatureMap<T>, p: T) -> Result<Vec<GemChannel<T>>> {
    check_domain(f, p)?;
    let n = T::of(f.positions() as f64);
    Ok((0..f.channels())
        .map(|c| {
            let xs = f.channel(c);
            if p == T::one() {
                let mean = xs.iter().copied().sum::<T>() / n;
                let log: T = xs
                    .iter()
                    .filter(|&&x| x > T::zero())
                    .map(|&x| x * x.ln())
                    .sum();
                return GemChannel {
                    out: mean,
                    mean_pow: mean,
                    mean_pow_log: log / n,
                };
            }
            let (mut pow, mut log) = (T::zero(), T::zero());
            for &x in xs {
                if x > T::zero() {
                    let xp = x.powf(p);
                    pow += xp;
                    log += xp * x.ln();
                }
            }
            let mean_pow = pow / n;
            GemChannel {
                out: mean_pow.powf(p.recip()),
                mean_pow,
                mean_pow_log: log / n,
            }
        })
        .collect())
}

/// Pools a `C×H×W` map to a `C` vector. `p = 1` is exactly global average pooling.
pub fn gem_pool<T: Scalar>(f: &FeatureMap<T>, p: T) -> Result<Tensor<T>> {
    let stats = gem_channels(f, p)?;
    Tensor::from_vec(&[stats.len()], stats.iter().map(|s| s.out).collect())
}

/// Contracts `upstream` (length `C`) with the Jacobians of [`gem_pool`].
///
/// Returns `(∂/∂F, ∂/∂p)`. Channels whose output is zero get a zero subgradient.
pub fn gem_pool_grad<T: Scalar>(
    f: &FeatureMap<T>,
    p: T,
    upstream: &[T],
) -> Result<(Tensor<T>, T)> {
    if upstream.len() != f.channels() {
        return Err(Error::Dimension(format!(
            "upstream length {} vs {} channels",
            upstream.len(),
            f.channels()
        )));
    }
    let stats = gem_channels(f, p)?;
    let positions = f.positions();
    let n = T::of(positions as f64);
    let mut df = Tensor::zeros(f.values.shape());
    let mut dp = T::zero();
    for (c, (s, &g)) in stats.iter().zip(upstream).enumerate() {
        dp += g * s.dp(p);
        if s.out <= T::zero() {
            continue;
        }
        let dst = &mut df.data_mut()[c * positions..(c + 1) * positions];
        for (d, &x) in dst.iter_mut().zip(f.channel(c)) {
            // (1/N) x^(p−1) out^(1−p)
            *d = g * (x / s.out).powf(p - T::one()) / n;
        }
    }
    Ok((df, dp))
}
