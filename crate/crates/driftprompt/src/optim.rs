//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam over an explicit parameter list. Anything not in the list is
/// untouched, which is how frozen weights stay frozen.
pub struct Adam {
    params: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(params: Vec<Tensor>, lr: f64) -> Adam {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Every managed parameter must carry a gradient.
    pub fn step(&mut self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad {
                    what: format!("optimizer parameter {i} (shape {:?})", p.shape()),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.with_data_mut(|w| {
                for j in 0..w.len() {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        Ok(())
    }

    /// Clear gradients of the managed parameters.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_with_unit_gradient() {
        let w = Tensor::param(vec![0.0], &[1]).unwrap();
        w.set_grad(vec![1.0]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 1e-4);
        opt.step().unwrap();
        // m_hat = v_hat = 1 after bias correction, so the update is
        // -lr / (1 + eps) = -9.9999...e-5
        let expect = -1e-4 / (1.0 + 1e-8);
        assert!((w.data()[0] - expect).abs() < 1e-15, "{}", w.data()[0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let w = Tensor::param(vec![0.5, -0.5], &[2]).unwrap();
        w.set_grad(vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 1e-3);
        opt.step().unwrap();
        assert_eq!(w.data(), vec![0.5, -0.5]);
        assert!(opt.m[0].iter().all(|&x| x == 0.0));
        assert!(opt.v[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(vec![w], 1e-3);
        let err = opt.step().unwrap_err();
        assert!(err.to_string().contains("parameter 0"), "{err}");
    }

    #[test]
    fn excluded_parameters_never_move() {
        let trained = Tensor::param(vec![1.0], &[1]).unwrap();
        let frozen = Tensor::param(vec![2.0], &[1]).unwrap();
        trained.set_grad(vec![1.0]).unwrap();
        frozen.set_grad(vec![1.0]).unwrap();
        let mut opt = Adam::new(vec![trained.clone()], 1e-2);
        opt.step().unwrap();
        assert_ne!(trained.data(), vec![1.0]);
        assert_eq!(frozen.data(), vec![2.0]);
    }
}
