use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// First and second moment estimates, laid out like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m_w: Vec<Array2<T>>,
    pub m_b: Vec<Array1<T>>,
    pub v_w: Vec<Array2<T>>,
    pub v_b: Vec<Array1<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub(crate) fn zeros(weights: &[Array2<T>], biases: &[Array1<T>]) -> Self {
        let zw = || weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect::<Vec<_>>();
        let zb = || biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect::<Vec<_>>();
        Self {
            step: 0,
            m_w: zw(),
            m_b: zb(),
            v_w: zw(),
            v_b: zb(),
        }
    }

    /// Bias-corrected update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub(crate) fn step(
        &mut self,
        weights: &mut [Array2<T>],
        biases: &mut [Array1<T>],
        grads: &Gradients<T>,
        config: &AdamConfig,
    ) {
        self.step += 1;
        let b1 = T::lit(config.beta1);
        let b2 = T::lit(config.beta2);
        let one = T::one();
        let c1 = one - T::lit(config.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let c2 = one - T::lit(config.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let lr = T::lit(config.learning_rate);
        let eps = T::lit(config.eps);
        let update = |p: &mut T, m: &mut T, v: &mut T, g: &T| {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for k in 0..weights.len() {
            Zip::from(&mut weights[k])
                .and(&mut self.m_w[k])
                .and(&mut self.v_w[k])
                .and(&grads.weights[k])
                .for_each(update);
            Zip::from(&mut biases[k])
                .and(&mut self.m_b[k])
                .and(&mut self.v_b[k])
                .and(&grads.biases[k])
                .for_each(update);
        }
    }
}
