//! Adam optimizer over any `Module`'s parameter walk.

use super::{Float, Module};

#[derive(Debug, Clone)]
pub struct Adam<F: Float> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    // First/second moment buffers, one slot per parameter tensor in visit order.
    slots: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            t: 0,
            slots: Vec::new(),
        }
    }

    /// One update from the gradients currently stored in the module.
    pub fn step<M: Module<F>>(&mut self, module: &mut M) {
        self.t += 1;
        let bias1 = F::one() - self.beta1.powi(self.t);
        let bias2 = F::one() - self.beta2.powi(self.t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let one = F::one();
        let mut idx = 0;
        let slots = &mut self.slots;
        module.visit_params_mut(&mut |_, _, value, grad| {
            if idx == slots.len() {
                slots.push((vec![F::zero(); value.len()], vec![F::zero(); value.len()]));
            }
            let (m, v) = &mut slots[idx];
            assert_eq!(m.len(), value.len(), "parameter layout changed mid-run");
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
