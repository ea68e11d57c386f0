//! Adam with decoupled weight decay.

use crate::encoder::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params<T>,
    v: Params<T>,
    decays: Vec<bool>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    /// Betas 0.9 / 0.999, eps 1e-8. Decay applies to weight matrices and
    /// embeddings, never to biases or norm parameters.
    pub fn new(params: &Params<T>, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decays: params.names().iter().map(|n| Params::<T>::decays(n)).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) {
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(self.eps);
        let shrink = T::lit(1.0 - lr * self.weight_decay);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(&self.decays);
        for ((((p, g), m), v), &decay) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let mut x = p.data[i];
                if decay {
                    x = x * shrink;
                }
                p.data[i] = x - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
