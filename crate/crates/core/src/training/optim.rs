use std::collections::HashMap;

use crate::tensor::{ParamId, ParamStore};

/// Adam with bias-corrected moments; `beta1 = 0.9`, `beta2 = 0.999`,
/// `eps = 1e-8` by default.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One Adam update of the listed parameters from their accumulated
/// gradients. Parameters without a gradient or frozen ones are left alone.
pub fn adam_step(store: &mut ParamStore, params: &[ParamId], state: &mut AdamState, lr: f64) {
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for &id in params {
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let (m, v) = state
            .moments
            .entry(id)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let g = g.data().to_vec();
        for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

/// Global L2 norm of the listed gradients before rescaling them to at most
/// `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, params: &[ParamId], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for &id in params {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}
