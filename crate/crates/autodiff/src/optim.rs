//! Adam optimizer over a [`ParamStore`].

use crate::graph::Gradients;
use crate::nn::{Binding, ParamStore};
use crate::tensor::Tensor;
use crate::Scalar;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam<F: Scalar> {
    pub lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: F) -> Self {
        let m = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: F::from_f64_lossy(0.9),
            beta2: F::from_f64_lossy(0.999),
            eps: F::from_f64_lossy(1e-8),
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update from the gradients of a bound forward pass.
    /// Parameters with no gradient this step are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, bind: &Binding, grads: &Gradients<F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let one = F::one();
        for (idx, (_, param)) in store.iter_mut().enumerate() {
            let Some(g) = grads.wrt(bind.vars()[idx]) else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (one - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (one - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                param.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
