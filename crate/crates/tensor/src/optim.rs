use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != names.len() {
            return shape_err(format!(
                "adam: {} params, {} grads, {} names",
                params.len(),
                grads.len(),
                names.len()
            ));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return shape_err(format!(
                    "adam: gradient {:?} for parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return shape_err("adam: parameter list changed between steps");
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (ob1, ob2) = (S::lit(1.0 - c.beta1), S::lit(1.0 - c.beta2));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                *w -= S::lit(c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads: &[f64]) -> Vec<f64> {
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = vec![Tensor::scalar(0.0)];
        let names = vec!["theta".to_string()];
        let mut trace = Vec::new();
        for &g in grads {
            adam.step(&mut p, &[Tensor::scalar(g)], &names).unwrap();
            trace.push(p[0].item());
        }
        trace
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let t = run(&[1.0]);
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        assert!((t[0] + 0.001).abs() < 1e-6);
        assert!((t[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let t = run(&[0.0; 10]);
        assert!(t.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_gradient_steps_are_equal_size() {
        let t = run(&[0.5, 0.5]);
        let d1 = t[0].abs();
        let d2 = (t[1] - t[0]).abs();
        assert!((d2 / d1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut adam = Adam::<f32>::new(AdamConfig::default());
        let mut p = vec![Tensor::scalar(1.0f32), Tensor::scalar(2.0)];
        let names = vec!["a".to_string(), "b".to_string()];
        let err = adam
            .step(&mut p, &[Tensor::scalar(1.0), Tensor::scalar(f32::NAN)], &names)
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("b".into()));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }
}
