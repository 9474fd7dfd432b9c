use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Hyperparameters for [`AdamState::step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient as `weight_decay * param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-7,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len(), self.first_moment.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let grad = gi + weight_decay * *pi;
                *mi = beta1 * *mi + (1.0 - beta1) * grad;
                *vi = beta2 * *vi + (1.0 - beta2) * grad * grad;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let delta = lr * m_hat / (v_hat.sqrt() + epsilon);
                // Skipping exact zeros keeps -0.0 from flipping sign.
                if delta != 0.0 {
                    *pi -= delta;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(cfg(0.1, 0.0), &params);
        state.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 at t = 1, so p ← 1 − 0.1 · 1 / (1 + 1e-8).
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(cfg(0.1, 0.0), &params);
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
        assert!((params[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        // f(p) = (p - 3)^2, grad = 2 (p - 3)
        let loss = |p: f64| (p - 3.0).powi(2);
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(cfg(0.05, 0.0), &params);
        let mut prev = loss(params[0].item());
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * (params[0].item() - 3.0));
            state.step(&mut params, &[g]).unwrap();
            let now = loss(params[0].item());
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let original = vec![Tensor::vector(vec![0.3, -0.0, 1e-300, -7.5])];
        let mut params = original.clone();
        let mut state = AdamState::new(cfg(0.0, 5e-7), &params);
        for _ in 0..3 {
            state
                .step(&mut params, &[Tensor::vector(vec![1.0, -2.0, 3.0, 0.5])])
                .unwrap();
        }
        for (a, b) in params[0].data().iter().zip(original[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn weight_decay_acts_as_l2_gradient() {
        // zero data gradient, wd = 1: effective grad = p, so the first step moves by ~lr toward 0.
        let mut params = vec![Tensor::scalar(2.0)];
        let mut state = AdamState::new(cfg(0.1, 1.0), &params);
        state.step(&mut params, &[Tensor::scalar(0.0)]).unwrap();
        assert!((params[0].item() - 1.9).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(cfg(0.1, 0.0), &params);
        let err = state.step(&mut params, &[Tensor::zeros(&[3])]);
        assert!(matches!(err, Err(NumericsError::ShapeMismatch { .. })));
    }
}
