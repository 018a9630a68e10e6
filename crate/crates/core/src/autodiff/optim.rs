use super::params::{GradBuffer, ParamStore};

/// Adam moments for every tensor in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`; increments `state.t`.
pub fn adam_step(params: &mut ParamStore, grads: &GradBuffer, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = &grads.slices()[k];
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let p = params.get_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`, steps counted from 1.
pub fn noam_lr(d_model: usize, step: u64, warmup: u64, factor: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}
