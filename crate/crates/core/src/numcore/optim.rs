use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{FaeError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every parameter not in `frozen`.
    ///
    /// Frozen parameters keep their values and moments. Parameters that did not
    /// take part in the forward pass are updated with a zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        frozen: &BTreeSet<ParamId>,
    ) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(FaeError::dim(
                "optimizer_step",
                &[self.first.len()],
                &[store.len()],
            ));
        }
        for (id, g) in grads.params() {
            if g.shape() != store.get(id).shape() {
                return Err(FaeError::dim(
                    "optimizer_step",
                    g.shape(),
                    store.get(id).shape(),
                ));
            }
            if !g.is_finite() {
                return Err(FaeError::Training {
                    step: self.step as usize,
                    msg: format!("non-finite gradient for parameter {}", store.name(id)),
                    last_good: None,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            if frozen.contains(&id) {
                continue;
            }
            let g = grads.param(id);
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
