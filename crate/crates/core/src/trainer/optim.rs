use serde::{Deserialize, Serialize};

use crate::model::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter moments; a parameter's moments are allocated on its first
/// gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![None; num_params],
            v: vec![None; num_params],
            step: 0,
        }
    }
}

/// One decoupled-decay AdamW step with bias correction:
/// `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)`. Parameters without a gradient are left
/// untouched.
pub fn adamw_update<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Vec<T>)],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let i = id.index();
        let n = g.len();
        let m = state.m[i].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; n]);
        let data = store.get_mut(*id).value.data_mut();
        for k in 0..n {
            let gk = g[k].to_f64_lossy();
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let (mh, vh) = (m[k] / bc1, v[k] / bc2);
            let p = data[k].to_f64_lossy();
            let upd = mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p;
            if lr != 0.0 {
                data[k] = T::lit(p - lr * upd);
            }
        }
    }
}

/// Linear warmup over `warmup_frac` of the steps, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warm = ((total as f64) * warmup_frac).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
