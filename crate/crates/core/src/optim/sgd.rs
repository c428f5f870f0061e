use crate::error::{Error, Result};
use crate::head::{HeadGrads, HeadParams, GEM_P_MAX, GEM_P_MIN};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be ≥ 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Which head tensors are held fixed. `true` means frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub gem_p: bool,
    pub w_emb: bool,
    pub b_emb: bool,
    pub w_cls: bool,
}

impl FreezeMask {
    pub const NONE: Self = Self {
        gem_p: false,
        w_emb: false,
        b_emb: false,
        w_cls: false,
    };

    /// Everything frozen except the GeM exponent.
    pub const ONLY_GEM_P: Self = Self {
        gem_p: false,
        w_emb: true,
        b_emb: true,
        w_cls: true,
    };

    pub fn all_frozen(&self) -> bool {
        self.gem_p && self.w_emb && self.b_emb && self.w_cls
    }
}

/// Momentum buffers, one per head tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub gem_p: T,
    pub w_emb: Tensor<T>,
    pub b_emb: Tensor<T>,
    pub w_cls: Tensor<T>,
}

impl<T: Scalar> SgdState<T> {
    pub fn zeros_like(params: &HeadParams<T>) -> Self {
        Self {
            gem_p: T::zero(),
            w_emb: Tensor::zeros(params.w_emb.shape()),
            b_emb: Tensor::zeros(params.b_emb.shape()),
            w_cls: Tensor::zeros(params.w_cls.shape()),
        }
    }

    fn matches(&self, params: &HeadParams<T>) -> bool {
        self.w_emb.shape() == params.w_emb.shape()
            && self.b_emb.shape() == params.b_emb.shape()
            && self.w_cls.shape() == params.w_cls.shape()
    }
}

/// `v ← μ·v + g + λ·θ; θ ← θ − lr·v`
fn update<T: Scalar>(param: &mut [T], vel: &mut [T], grad: &[T], lr: T, momentum: T, wd: T) {
    for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// One SGD step with momentum and coupled weight decay on every unfrozen tensor.
///
/// `gem_p` is clamped to `[1, 12]` afterwards. Frozen tensors and their velocities are left untouched.
pub fn sgd_step<T: Scalar>(
    params: &mut HeadParams<T>,
    grads: &HeadGrads<T>,
    cfg: &SgdConfig,
    state: &mut SgdState<T>,
    lr: f64,
    mask: FreezeMask,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Optimizer(format!("learning rate {lr} must be ≥ 0")));
    }
    if !state.matches(params)
        || grads.w_emb.shape() != params.w_emb.shape()
        || grads.b_emb.shape() != params.b_emb.shape()
        || grads.w_cls.shape() != params.w_cls.shape()
    {
        return Err(Error::Optimizer(format!(
            "shape mismatch: params W_emb {:?} / W_cls {:?}, grads W_emb {:?} / W_cls {:?}",
            params.w_emb.shape(),
            params.w_cls.shape(),
            grads.w_emb.shape(),
            grads.w_cls.shape()
        )));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    if !mask.gem_p {
        let mut p = [params.gem_p];
        let mut v = [state.gem_p];
        update(&mut p, &mut v, &[grads.gem_p], lr, mu, wd);
        params.gem_p = p[0].max(T::of(GEM_P_MIN)).min(T::of(GEM_P_MAX));
        state.gem_p = v[0];
    }
    if !mask.w_emb {
        update(params.w_emb.data_mut(), state.w_emb.data_mut(), grads.w_emb.data(), lr, mu, wd);
    }
    if !mask.b_emb {
        update(params.b_emb.data_mut(), state.b_emb.data_mut(), grads.b_emb.data(), lr, mu, wd);
    }
    if !mask.w_cls {
        update(params.w_cls.data_mut(), state.w_cls.data_mut(), grads.w_cls.data(), lr, mu, wd);
    }
    params.mark_modified();
    Ok(())
}
