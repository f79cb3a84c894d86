//! Adam with bias correction.

use crate::tensor::{ParamKind, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
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

/// First/second moment estimates, one pair per parameter, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(index)?.as_ref().map(|(m, v)| (m, v))
    }

    /// One update over every trainable weight. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for (id, p) in store.iter_mut() {
            if !p.trainable || p.kind != ParamKind::Weight {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (p.value.zeros_like(), p.value.zeros_like()));
            let grads = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
