use crate::error::{Error, Result};
use crate::model::ChamParams;

use super::TrainConfig;

/// First and second moments per parameter tensor, in
/// [`ChamParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ChamParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Learning rate for a 0-based iteration: `lr_initial` before
/// `lr_switch_iter`, `lr_after` from then on.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter < cfg.lr_switch_iter {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}

/// One bias-corrected Adam update on a single tensor; `t` is the 1-based
/// update count.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Applies one update to every tensor. The learning rate follows
/// [`lr_schedule`] at the state's current step. Nothing is modified when a
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ChamParams,
    grads: &ChamParams,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "optimizer state tracks {} tensors, gradient has {}",
            state.m.len(),
            grads.len()
        )));
    }
    for g in &grads {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("gradient of {}", g.name),
            });
        }
    }
    let lr = lr_schedule(state.step, cfg);
    let t = state.step + 1;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.data.len() != g.data.len() || m.len() != g.data.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} of length {}", p.name, p.data.len()),
                format!("gradient {} / moment {}", g.data.len(), m.len()),
            ));
        }
        adam_update(p.data, g.data, m, v, t, lr, cfg);
    }
    state.step = t;
    Ok(())
}
