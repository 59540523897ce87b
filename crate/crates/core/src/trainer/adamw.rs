//! AdamW with decoupled weight decay.

use crate::numerics::Tensor;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// One update at step `t` (1-based, used for bias correction). Parameters and
/// gradients are matched by position; names are only used in errors.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[(String, &Tensor)],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    config: &AdamWConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || t == 0 {
        return Err(TrainError::Config(format!(
            "adamw: {} params vs {} grads at step {t}",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (i, ((name, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("adamw: shape mismatch for {name}")));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * gk;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *w);
        }
    }
    Ok(())
}
