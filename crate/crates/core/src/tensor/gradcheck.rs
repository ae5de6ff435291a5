use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Largest relative disagreement between the analytic gradient of `f` at
/// `point` and a central finite difference with step `eps`:
/// `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Float,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be > 0"));
    }
    let x = point.detach().requires_grad();
    let y = f(&x)?;
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let base = point.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut shifted = base.clone();
        shifted[i] += T::of(delta);
        Ok(f(&Tensor::new(point.shape(), shifted)?)?.item().to_f64c())
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let err = (a.to_f64c() - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::<f64>::new(&[4], vec![0.5, -1.25, 2.0, 3.0]).unwrap();
        let x = Tensor::<f64>::new(&[4], vec![0.1, 0.2, -0.3, 0.9]).unwrap();
        let e = grad_check(|v| Ok(ops::sum(&ops::mul(v, &w)?)), &x, 1e-3).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::new(&[5], vec![0.3, -0.7, 0.05, 0.9, -0.45]).unwrap();
        let e = grad_check(|v| Ok(ops::sum(&ops::mul(v, v)?)), &x, 1e-3).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|v| Ok(ops::sum(v)), &x, 0.0).is_err());
    }
}
