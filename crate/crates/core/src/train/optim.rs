use crate::model::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `0` or infinite disables clipping.
    pub clip: f64,
    /// Decoupled weight decay, off by default.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one slot per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: vec![None; params.len()],
            v: vec![None; params.len()],
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[(ParamId, Vec<f64>)]) -> f64 {
    let mut s = 0.0;
    for (_, g) in grads {
        for x in g {
            s += x * x;
        }
    }
    s.sqrt()
}

/// Scales `grads` in place so their global norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f64>)], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if clip > 0.0 && clip.is_finite() && norm > clip {
        let f = clip / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= f;
            }
        }
    }
    norm
}

/// Clips, then applies one bias-corrected Adam update to every parameter
/// that has a gradient. Returns the pre-clip gradient norm.
pub fn adam_step(params: &mut ParamSet, grads: &mut [(ParamId, Vec<f64>)], state: &mut AdamState, cfg: &AdamConfig) -> f64 {
    if state.m.len() < params.len() {
        state.m.resize(params.len(), None);
        state.v.resize(params.len(), None);
    }
    let norm = clip_global_norm(grads, cfg.clip);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let p = params.get_mut(*id);
        let m = state.m[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            let mut upd = mhat / (vhat.sqrt() + cfg.eps);
            if cfg.weight_decay > 0.0 {
                upd += cfg.weight_decay * p.data[i];
            }
            p.data[i] -= cfg.lr * upd;
        }
    }
    norm
}

/// Name of the first updated parameter holding a non-finite value.
pub(crate) fn first_nonfinite<'a>(params: &'a ParamSet, grads: &[(ParamId, Vec<f64>)]) -> Option<&'a str> {
    grads
        .iter()
        .find(|(id, _)| params.get(*id).data.iter().any(|v| !v.is_finite()))
        .map(|(id, _)| params.name(*id))
}
