//! Adaptive-moment optimizer with decoupled weight decay.

use crate::autodiff::{Arr, Gradients, ParamId, ParamStore};

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store
            .iter_params()
            .map(|(_, _, v)| Arr::zeros(v.raw_dim()))
            .collect();
        let v = store
            .iter_params()
            .map(|(_, _, v)| Arr::zeros(v.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    /// One update over every parameter that received a gradient. Weight decay
    /// is applied directly to the parameter, decoupled from the moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.param_count() {
            let id = ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = store.param_mut(id);
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
    }

    pub fn moments(&self, i: usize) -> (&Arr, &Arr) {
        (&self.m[i], &self.v[i])
    }

    pub fn set_state(&mut self, t: u64, m: Vec<Arr>, v: Vec<Arr>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state length mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
