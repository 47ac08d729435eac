//! Adam with bias correction and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Learning rate for a zero-based `epoch`: one decade lower every 3 epochs.
pub fn lr_schedule(initial_lr: f64, epoch: usize) -> f64 {
    initial_lr * 0.1f64.powi((epoch / 3) as i32)
}

/// Adam moments for a fixed list of parameter tensors.
///
/// Step counts are kept per tensor, so a tensor that stays frozen for a
/// while starts with fresh bias correction once it is first updated.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    tensor_steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            tensor_steps: vec![0; params.len()],
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One Adam update. Tensors with `trainable[i] == false` are left alone,
    /// moments included.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], trainable: Option<&[bool]>) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(&self.first[i]) || !g.same_shape(&self.first[i]) {
                return Err(Error::dim(format!(
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            self.tensor_steps[i] += 1;
            let t = self.tensor_steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gj), mj), vj) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(1e-4, 0), 1e-4);
        assert_eq!(lr_schedule(1e-4, 2), 1e-4);
        assert!((lr_schedule(1e-4, 3) - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(1e-4, 7) - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = OptimizerState::new(&[&p], 1e-3);
        st.step(&mut [&mut p], &[Tensor::zeros(&[2])], None).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let g = [0.5, -2.0, 1e-3];
        let lr = 1e-4;
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut st = OptimizerState::new(&[&p], lr);
        st.step(&mut [&mut p], &[Tensor::vector(g.to_vec())], None).unwrap();
        for (w, gj) in p.data().iter().zip(g) {
            // m_hat = g, v_hat = g^2 after bias correction
            let m_hat = (0.1 * gj) / 0.1;
            let v_hat = (0.001 * gj * gj) / (1.0 - 0.999);
            let expected = -lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((w - expected).abs() < 1e-18, "{w} vs {expected}");
            assert!((w + lr * gj.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn identical_runs_give_identical_state() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, 0.1]);
            let mut st = OptimizerState::new(&[&p], 1e-2);
            for k in 0..5 {
                let g = Tensor::vector(vec![k as f64 - 2.0, 0.5 * k as f64]);
                st.step(&mut [&mut p], &[g], None).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_tensors_untouched_and_shape_checked() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let mut st = OptimizerState::new(&[&a, &b], 0.1);
        let g = [Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])];
        st.step(&mut [&mut a, &mut b], &g, Some(&[true, false])).unwrap();
        assert!(a.data()[0] < 1.0);
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(st.second_moments()[1].data()[0], 0.0);
        let bad = [Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![1.0])];
        assert!(st.step(&mut [&mut a, &mut b], &bad, None).is_err());
    }
}
