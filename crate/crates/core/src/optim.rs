//! Adam with a learning rate per parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone)]
struct Slot {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: BTreeMap<ParamId, Slot>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Registers `ids` with learning rate `lr`. Re-adding a parameter
    /// replaces its rate and resets its moments.
    pub fn add_group(&mut self, store: &ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "lr",
                reason: format!("must be positive and finite, got {lr}"),
            });
        }
        for &id in ids {
            let n = store.get(id).numel();
            self.slots.insert(
                id,
                Slot {
                    lr,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
        }
        Ok(())
    }

    pub fn lr(&self, id: ParamId) -> Option<f64> {
        self.slots.get(&id).map(|s| s.lr)
    }

    pub fn num_params(&self) -> usize {
        self.slots.len()
    }

    /// One update over every registered parameter that is trainable and has
    /// a gradient. Parameters outside the optimizer are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (&id, slot) in self.slots.iter_mut() {
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let data = p.data_mut();
            for i in 0..data.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = slot.m[i] / c1;
                let vh = slot.v[i] / c2;
                data[i] -= slot.lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad = Some(g);
        }
    }
}
