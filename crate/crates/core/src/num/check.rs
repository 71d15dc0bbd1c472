use alloc::vec::Vec;

use super::tape::GradTape;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compare analytic gradients of a scalar function against central finite
/// differences.
///
/// `f` receives a tape plus the parameter tensors and must return a scalar
/// tensor. The analytic pass watches every parameter; the numeric pass
/// re-evaluates `f` at `x +- h` per coordinate with nothing watched.
/// Returns the maximum over all coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Tensor]) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::config("finite_diff_check requires h > 0"));
    }

    let mut tape = GradTape::new();
    let watched: Vec<Tensor> = params.iter().map(|p| tape.watch(p)).collect();
    let loss = f(&mut tape, &watched)?;
    let base = loss.scalar()?;
    if !base.is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    let store = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = watched
        .iter()
        .map(|w| store.grad(w))
        .collect::<Result<_>>()?;

    let eval_at = |pi: usize, ci: usize, delta: f64| -> Result<f64> {
        let mut shifted: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
        shifted[pi].data_mut()[ci] += delta;
        let mut tape = GradTape::new();
        let value = f(&mut tape, &shifted)?.scalar()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.numel() {
            let plus = eval_at(pi, ci, h)?;
            let minus = eval_at(pi, ci, -h)?;
            let central = (plus - minus) / (2.0 * h);
            let a = grad.data()[ci];
            let err = (a - central).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact_to_second_order() {
        // f(x) = sum(x^2) at x = 3: analytic gradient 6.
        let params = [Tensor::vector(vec![3.0])];
        let err = finite_diff_check(
            |tape, p| {
                let x = &p[0];
                tape.mul(x, x)
            },
            &params,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "central differences are exact on quadratics, err={err}");
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        // d sigmoid / dx at 0 is 0.25.
        let params = [Tensor::vector(vec![0.0])];
        let err = finite_diff_check(|tape, p| tape.sigmoid(&p[0]), &params, 1e-3).unwrap();
        assert!(err < 1e-6, "err={err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = [Tensor::vector(vec![0.7])];
        let err = finite_diff_check(
            |tape, p| {
                let zero = Tensor::zeros(&[1]);
                let killed = tape.mul(&p[0], &zero)?;
                tape.add(&killed, &Tensor::vector(vec![4.0]))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_h() {
        let params = [Tensor::vector(vec![1.0])];
        assert!(finite_diff_check(|tape, p| tape.sigmoid(&p[0]), &params, 0.0).is_err());
    }
}
