//! Adam and the plateau learning-rate schedule.

use crate::error::{NnError, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First-moment estimate for parameter `index`, if it has been updated.
    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.v.get(index).and_then(Option::as_ref)
    }
}

/// One bias-corrected Adam update of every trainable parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        match grads.param(id) {
            None => return Err(NnError::Consistency(format!("no gradient for parameter {}", p.name))),
            Some(g) if g.shape() != p.tensor.shape() => {
                return Err(NnError::Consistency(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.tensor.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        let g = grads.param(id).expect("checked above").data();
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        let (b1, b2) = (state.beta1, state.beta2);
        for (((w, m), v), &g) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= state.lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrAction {
    None,
    Halve,
    Stop,
}

/// Halves the rate after `halve_after` epochs without a new best dev loss
/// and stops after `stop_after`.
#[derive(Clone, Debug)]
pub struct LrScheduler {
    pub halve_after: usize,
    pub stop_after: usize,
    best: f64,
    stale: usize,
}

impl Default for LrScheduler {
    fn default() -> Self {
        Self::new(6, 20)
    }
}

impl LrScheduler {
    pub fn new(halve_after: usize, stop_after: usize) -> Self {
        Self {
            halve_after,
            stop_after,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stale_epochs(&self) -> usize {
        self.stale
    }

    /// Feeds one epoch's dev loss. Returns whether it is a new best along
    /// with the action to take.
    pub fn observe(&mut self, dev_loss: f64) -> (bool, LrAction) {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.stale = 0;
            return (true, LrAction::None);
        }
        self.stale += 1;
        let action = if self.stale >= self.stop_after {
            LrAction::Stop
        } else if self.halve_after > 0 && self.stale % self.halve_after == 0 {
            LrAction::Halve
        } else {
            LrAction::None
        };
        (false, action)
    }

    /// Replays a whole history and returns the action after its last entry.
    pub fn action_for(history: &[f64]) -> LrAction {
        let mut s = Self::default();
        history.iter().fold(LrAction::None, |_, &l| s.observe(l).1)
    }
}
