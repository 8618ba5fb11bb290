//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Optimizer state aligned with a parameter store. Parameters whose gradient
/// slot is empty are skipped entirely for that step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Per-parameter update count, for bias correction.
    pub t: Vec<u64>,
}

/// Weight decay applies to weight matrices only, not to biases, norm
/// affines, or token/position embeddings.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm")
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> AdamW {
        let mut opt = AdamW { cfg, m: Vec::new(), v: Vec::new(), t: Vec::new() };
        opt.sync(store);
        opt
    }

    /// Grows the state to cover parameters appended to the store.
    pub fn sync(&mut self, store: &ParamStore) {
        for (id, p) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.0, self.m.len());
            self.m.push(Mat::zeros(p.value.rows, p.value.cols));
            self.v.push(Mat::zeros(p.value.rows, p.value.cols));
            self.t.push(0);
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.sync(store);
        let c = self.cfg;
        for (i, g) in grads.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let decay = if decays(store.name(id)) { c.weight_decay } else { 0.0 };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - libm::pow(c.beta1, f64::from(t));
            let bc2 = 1.0 - libm::pow(c.beta2, f64::from(t));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * (mhat / (math::sqrt(vhat) + c.eps) + decay * p.data[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w.weight", Mat::from_vec(1, 2, alloc::vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let mut g = Grads::new(1);
        g.accumulate(id, &Mat::from_vec(1, 2, alloc::vec![0.3, -5.0]));
        opt.step(&mut store, &g, 0.1);
        let p = store.get(id);
        assert!((p.data[0] - 0.9).abs() < 1e-6);
        assert!((p.data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn empty_gradient_slots_are_untouched() {
        let mut store = ParamStore::new();
        store.add("a.weight", Mat::filled(2, 2, 1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &Grads::new(1), 0.1);
        assert_eq!(store.get(ParamId(0)), &Mat::filled(2, 2, 1.0));
    }

    #[test]
    fn decoupled_decay_only_on_weights() {
        assert!(decays("encoder.blocks.0.attn.q.weight"));
        assert!(!decays("encoder.blocks.0.norm1.weight"));
        assert!(!decays("encoder.cls"));
        assert!(!decays("head.linear.bias"));
    }
}
