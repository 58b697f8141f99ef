//! Adam optimizer with checkpointable state.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

/// First/second-moment state per parameter name.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    m: IndexMap<String, ArrayD<F>>,
    v: IndexMap<String, ArrayD<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, m: IndexMap::new(), v: IndexMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the supplied gradients. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &IndexMap<String, ArrayD<F>>) {
        self.t += 1;
        let b1 = F::c(self.cfg.beta1);
        let b2 = F::c(self.cfg.beta2);
        let lr = F::c(self.cfg.lr);
        let eps = F::c(self.cfg.eps);
        let corr1 = F::one() - F::c(self.cfg.beta1.powi(self.t as i32));
        let corr2 = F::one() - F::c(self.cfg.beta2.powi(self.t as i32));
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m = &*m * b1 + &(grad * (F::one() - b1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = &*v * b2 + &(grad.mapv(|x| x * x) * (F::one() - b2));
            let mhat = &*m / corr1;
            let vhat = &*v / corr2;
            let update = mhat / (vhat.mapv(F::sqrt) + eps) * lr;
            let p = store.get_mut(name);
            *p = &*p - &update;
        }
    }

    /// Persist moments and step counter into `store` under `prefix.`.
    pub fn save_state(&self, store: &mut ParamStore<F>, prefix: &str) {
        store.insert_buffer(
            format!("{prefix}.t"),
            ArrayD::from_elem(IxDyn(&[1]), F::c(self.t as f64)),
        );
        for (name, m) in &self.m {
            store.insert_buffer(format!("{prefix}.m.{name}"), m.clone());
        }
        for (name, v) in &self.v {
            store.insert_buffer(format!("{prefix}.v.{name}"), v.clone());
        }
    }

    /// Rebuild from state saved by [`Adam::save_state`].
    pub fn load_state(store: &ParamStore<F>, prefix: &str, cfg: AdamConfig) -> Self {
        let mut adam = Adam::new(cfg);
        let tkey = format!("{prefix}.t");
        if store.contains(&tkey) {
            adam.t = store.get(&tkey)[[0]].to_f64().expect("finite step counter") as u64;
        }
        let mpat = format!("{prefix}.m.");
        let vpat = format!("{prefix}.v.");
        for name in store.names() {
            if let Some(stripped) = name.strip_prefix(&mpat) {
                adam.m.insert(stripped.to_string(), store.get(name).clone());
            } else if let Some(stripped) = name.strip_prefix(&vpat) {
                adam.v.insert(stripped.to_string(), store.get(name).clone());
            }
        }
        adam
    }
}
