use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of `x`.
///
/// Intended for `f64` checks; in `f32` the default step of `1e-4` loses most digits.
pub fn central_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> T,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { coord: i });
        }
        grad.data_mut()[i] = (up - down) / two_h;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let g = central_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_and_linear() {
        let x = Tensor::from_vec(&[3], vec![0.3f64, -1.0, 7.0]).unwrap();
        let g = central_diff_grad(|_| 5.0, &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = central_diff_grad(|t| t.data().iter().sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::from_vec(&[3], vec![1.0f64, 5e-5, 2.0]).unwrap();
        let err = central_diff_grad(|t| t.data()[1].ln(), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Oracle { coord: 1 }));
    }
}
