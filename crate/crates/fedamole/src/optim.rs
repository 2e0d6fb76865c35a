//! Adam optimizer over a flat list of parameters.
//!
//! Moment buffers are aligned with a fixed parameter visitation order;
//! callers must visit parameters in the same order on every step.

use crate::tensor::Param;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction over the visited parameters.
    /// Gradients are zeroed afterwards; frozen parameters are untouched.
    pub fn step<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a mut Param>,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut idx = 0;
        for p in params {
            if !p.trainable {
                continue;
            }
            if idx == self.moments.len() {
                self.moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = &mut self.moments[idx];
            debug_assert_eq!(m.len(), p.value.len(), "parameter order changed between steps");
            for i in 0..p.value.len() {
                let g = p.grad.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
            idx += 1;
        }
    }
}
