//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare an analytic gradient against central differences of `value_fn`,
/// coordinate by coordinate.
///
/// Returns the max relative error with denominator `max(|a|, |b|, 1e-8)`.
/// `h` must lie in `(0, 1e-2]`.
pub fn grad_check<F>(value_fn: F, analytic_grad: &Tensor, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Config(format!("h must be in (0, 1e-2], got {h}")));
    }
    analytic_grad.require_same_shape(point, "gradient vs point")?;

    let mut probe = point.clone();
    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = value_fn(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = value_fn(&probe);
        probe.data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = analytic_grad.data()[i];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn quadratic_has_tiny_error() {
        // f(x) = 0.5*||x||^2, grad = x.
        let point = Tensor::from_vec(vec![3.0, 4.0]);
        let err = grad_check(|x| 0.5 * x.sq_norm(), &point, &point, 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn constant_function_error_is_zero() {
        let point = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let zero = Tensor::zeros(&[3]);
        let err = grad_check(|_| 42.0, &zero, &point, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn bad_h_rejected() {
        let p = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(|_| 0.0, &p, &p, 0.0).is_err());
        assert!(grad_check(|_| 0.0, &p, &p, 0.5).is_err());
    }

    #[test]
    fn silu_mlp_input_gradient() {
        // Differentiate a fixed projection of the net output with respect to
        // the input point.
        let net = Mlp::init(&[3, 16, 16, 2], Activation::Silu, 21).unwrap();
        let mut rng = rng_from(77);
        let proj: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let value = |x: &Tensor| -> f64 {
            let y = net.eval(x).unwrap();
            crate::tensor::slice_dot(y.data(), &proj)
        };
        let point = Tensor::from_vec((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, cache) = net.forward(&point).unwrap();
        let (_, dx) = net.backward(&cache, &Tensor::from_vec(proj.clone())).unwrap();
        let err = grad_check(value, &dx, &point, 1e-5).unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
