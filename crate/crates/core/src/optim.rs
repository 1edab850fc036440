//! Adam with bias correction and global-norm gradient clipping.
//!
//! Both operate on a `ParamStore` after a backward pass has filled the
//! gradient buffers. Frozen parameters (requires_grad = false) are skipped
//! entirely: no moment updates, no value changes, so their bytes never move.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Strictly increasing; step t's bias correction uses t starting at 1.
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers are allocated to match the store's current parameters.
    pub fn new(store: &ParamStore, learning_rate: f64) -> AdamState {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
            v: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter that has a
/// gradient buffer. Parameters without gradients this step keep their moment
/// buffers untouched as well, so a parameter that never receives gradients is
/// bitwise stable across the whole run.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let tensor = store.get_mut(id);
        if !tensor.requires_grad {
            continue;
        }
        let n = tensor.numel();
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        if m.len() != n || v.len() != n {
            return Err(Error::Usage(format!(
                "moment buffers for parameter {} do not match its shape",
                id.0
            )));
        }
        let Some(grad) = tensor.grad.as_ref() else {
            continue;
        };
        // Split borrows: grad is read-only, data is written.
        let grad = grad.clone();
        for i in 0..n {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            tensor.data[i] -= state.learning_rate * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Global L2-norm clipping across every trainable gradient in the store: if
/// the joint norm exceeds `max_norm`, every gradient is scaled by
/// max_norm/norm, which preserves direction exactly and never increases the
/// norm. Returns the pre-clip global norm.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id);
        if !t.requires_grad {
            continue;
        }
        if let Some(g) = &t.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite gradient norm".into()));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(norm)
}
