//! Adam with decoupled weight decay over a flat parameter vector.

use crate::{fl, Float};

#[derive(Debug, Clone)]
pub struct AdamW<T: Float> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    weight_decay: T,
    step: u32,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

impl<T: Float> AdamW<T> {
    pub fn new(
        param_count: usize,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    ) -> Self {
        Self {
            lr: fl(lr),
            beta1: fl(beta1),
            beta2: fl(beta2),
            epsilon: fl(epsilon),
            weight_decay: fl(weight_decay),
            step: 0,
            first_moment: vec![T::zero(); param_count],
            second_moment: vec![T::zero(); param_count],
        }
    }

    /// One update in place; decay is applied to the parameters directly,
    /// not through the gradient.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = fl::<T>(f64::from(self.step));
        let bias1 = T::one() - self.beta1.powf(t);
        let bias2 = T::one() - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (T::one() - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] = params[i]
                - self.lr * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * params[i]);
        }
    }
}
