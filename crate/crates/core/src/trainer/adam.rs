use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { config, v: m.clone(), m, t: 0 }
    }

    /// One Adam update of every parameter in place.
    ///
    /// `params[k]` is updated with `grads[k]`; the step counter is bumped
    /// before bias correction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            assert_eq!(g.len(), p.len(), "gradient shape mismatch for tensor {k}");
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *theta -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::zeros(&[2]);
        st.step(&mut [&mut p], &[&g]);
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_learning_rate(0.001), [&p]);
        st.step(&mut [&mut p], &[&Tensor::scalar(1.0)]);
        // m̂ = v̂ = 1, so the step is lr / (1 + ε).
        assert!((p.item() + 0.001).abs() < 1e-10);
    }

    #[test]
    fn state_carries_between_steps() {
        let g = Tensor::scalar(0.5);
        let mut twice = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig::with_learning_rate(0.01), [&twice]);
        st.step(&mut [&mut twice], &[&g]);
        st.step(&mut [&mut twice], &[&g]);

        let mut once = Tensor::scalar(0.0);
        let mut st2 = AdamState::new(AdamConfig::with_learning_rate(0.02), [&once]);
        st2.step(&mut [&mut once], &[&g]);
        // The moment buffers differ: m = 0.095 after two steps, 0.05 after one.
        assert_eq!(st.t, 2);
        assert_eq!(st2.t, 1);
        assert!((st.m[0].item() - 0.095).abs() < 1e-15);
        assert!((st2.m[0].item() - 0.05).abs() < 1e-15);
        // A constant gradient keeps m̂ / √v̂ = 1 at every step, so the
        // displacements agree to within the ε term.
        assert!((twice.item() + 0.02).abs() < 1e-9);
        assert!((once.item() + 0.02).abs() < 1e-9);
    }
}
