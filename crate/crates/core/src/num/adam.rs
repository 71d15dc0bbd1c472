use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::fmath;
use crate::{Error, Result};

/// Adam optimizer state: bias-corrected first/second moment estimates per
/// parameter plus a shared step counter.
///
/// Defaults follow the usual recurrence: `beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8`; the learning rate is the caller's choice (`0.01` in the
/// training configs here).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            moments: Vec::new(),
        }
    }

    /// Steps taken so far; strictly increases with each [`Adam::step`].
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter given its accumulated gradient.
    ///
    /// The parameter list must keep the same order and shapes across calls;
    /// moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect();
        } else if self.moments.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} moment slots", params.len(), self.moments.len()),
            ));
        }
        for ((param, grad), (m, v)) in params.iter().zip(grads).zip(&self.moments) {
            if param.numel() != grad.len() || param.numel() != m.len() || param.numel() != v.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {} vs grad {} elements", param.numel(), grad.len()),
                ));
            }
        }

        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let m_corr = 1.0 - self.beta1_pow;
        let v_corr = 1.0 - self.beta2_pow;

        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / m_corr;
                let v_hat = v[i] / v_corr;
                data[i] -= self.lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // theta = 0, g = 1: m_hat = 1, v_hat = 1, so the update is
        // -lr / (1 + eps).
        let mut adam = Adam::new(0.01);
        let mut theta = Tensor::vector(vec![0.0]);
        adam.step(&mut [&mut theta], &[&[1.0]]).unwrap();
        assert!((theta.data()[0] + 0.01).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = Adam::new(0.01);
        let mut theta = Tensor::vector(vec![1.25, -0.5]);
        for _ in 0..5 {
            adam.step(&mut [&mut theta], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta.data(), &[1.25, -0.5]);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_its_sign() {
        let mut adam = Adam::new(0.01);
        let mut theta = Tensor::vector(vec![0.3]);
        let mut last = theta.data()[0];
        for _ in 0..2 {
            adam.step(&mut [&mut theta], &[&[2.5]]).unwrap();
            let now = theta.data()[0];
            assert!(now < last, "positive gradient must decrease the parameter");
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut adam = Adam::new(0.01);
        let mut theta = Tensor::vector(vec![0.0, 0.0]);
        assert!(adam.step(&mut [&mut theta], &[&[1.0]]).is_err());
    }
}
