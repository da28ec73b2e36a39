//! Central-difference gradients, used as an oracle for the tape.

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·e) − f(x − h·e)) / 2h` for every coordinate `e`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(config_err(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Divergence {
                step: i,
                what: format!("non-finite function value probing coordinate {i}"),
            });
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::row_vector(&[1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::row_vector(&[0.3, -1.0, 4.0]).unwrap();
        let g = finite_diff_grad(|_| 7.5, &x, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_probe_is_divergence() {
        let x = Tensor::row_vector(&[0.0]).unwrap();
        let err = finite_diff_grad(|t| if t.data()[0] > 0.0 { f64::NAN } else { 0.0 }, &x, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }
}
