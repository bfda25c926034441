//! Central-difference gradient oracle.

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Central-difference estimate of `grad f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let x = params.values()[i];
        probe.values_mut()[i] = x + step;
        let up = f(&probe);
        probe.values_mut()[i] = x - step;
        let down = f(&probe);
        probe.values_mut()[i] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective evaluation around coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    params.with_values(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vectors vanish.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative error of unequal lengths");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::TensorDesc;

    fn sample() -> ParamVector {
        ParamVector::new(
            vec![TensorDesc::new("x", vec![5])],
            vec![0.5, -1.0, 2.0, 0.0, 3.25],
        )
        .unwrap()
    }

    #[test]
    fn sum_has_unit_gradient() {
        let g = finite_diff_grad(|p| p.values().iter().sum(), &sample(), 1e-6).unwrap();
        for v in g.values() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = sample();
        let g = finite_diff_grad(|q| 0.5 * q.norm().powi(2), &p, 1e-6).unwrap();
        assert!(relative_l2_error(g.values(), p.values()) < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_diff_grad(|_| 0.0, &sample(), 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(
                |p| if p.values()[2] > 2.0 { f64::NAN } else { 0.0 },
                &sample(),
                1e-3
            ),
            Err(Error::NonFinite(_))
        ));
    }
}
