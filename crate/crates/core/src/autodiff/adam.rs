use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. A parameter without a gradient buffer sees a zero gradient.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves the store untouched.
pub fn adam_step(store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for p in store.params() {
        if let Some(g) = p.value.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at index {i}", p.name)));
            }
        }
    }
    for p in store.params_mut() {
        p.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(p.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(p.t as i32);
        let grad = p.value.grad().map(<[f64]>::to_vec);
        let n = p.value.len();
        let values = p.value.values_mut();
        for i in 0..n {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
