use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const DEFAULT_LR: f64 = 1e-3;

/// Adam with bias correction. Moments are allocated on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(T::lit(DEFAULT_LR))
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's gradient buffer.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid("parameter set changed between Adam steps"));
        }
        for (i, p) in params.iter().enumerate() {
            let finite = p.grad().is_some_and(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::NonFinite {
                    what: format!("gradient of parameter tensor {i}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (data, grad) = p.data_and_grad_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap();
        t.grad_mut()[0] = grad;
        t
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = Tensor::new(vec![3], vec![0.25f32, -1.0, 3.0]).unwrap();
        p.grad_mut();
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), &[0.25, -1.0, 3.0]);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(2.0, 1.0);
        let mut adam = Adam::default();
        adam.step(&mut [&mut p]).unwrap();
        let expected = 2.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar_param(1.0, f64::NAN);
        let mut adam = Adam::default();
        assert!(matches!(adam.step(&mut [&mut p]), Err(Error::NonFinite { .. })));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn quadratic_bowl_loss_strictly_decreases() {
        // f(x, y) = (x - 1)² + 3(y + 2)²
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let mut adam = Adam::new(0.05);
        let loss = |d: &[f64]| (d[0] - 1.0).powi(2) + 3.0 * (d[1] + 2.0).powi(2);
        let mut prev = loss(p.data());
        for _ in 0..10 {
            let (x, y) = (p.data()[0], p.data()[1]);
            let g = p.grad_mut();
            g[0] = 2.0 * (x - 1.0);
            g[1] = 6.0 * (y + 2.0);
            adam.step(&mut [&mut p]).unwrap();
            let now = loss(p.data());
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }
}
