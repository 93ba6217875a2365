//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use crate::math;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// Optimizer state. Frozen parameters are never read for update nor written.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: Vec<Option<Moments>>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: Vec::new(), steps: 0 }
    }

    /// Number of update steps applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` using the accumulated
    /// gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::powf(c.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(c.beta2, t as f32);
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn export_state(&self) -> Vec<Option<(Tensor, Tensor)>> {
        self.state.iter().map(|s| s.as_ref().map(|s| (s.m.clone(), s.v.clone()))).collect()
    }

    pub fn import_state(&mut self, steps: u64, state: Vec<Option<(Tensor, Tensor)>>) {
        self.steps = steps;
        self.state = state.into_iter().map(|s| s.map(|(m, v)| Moments { m, v })).collect();
    }
}
