use crate::params::{Binding, ParamKind, ParamStore};
use crate::real::Real;
use crate::tape::Gradients;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Weights that received no gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, binding: &Binding, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for (id, var) in binding.iter() {
            if store.entry(id).kind != ParamKind::Weight {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
