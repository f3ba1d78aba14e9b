//! SGD with momentum (segmentation network and memories) and bias-corrected
//! Adam (discriminators).
//!
//! SGD convention: weight decay is folded into the gradient before the
//! velocity update, and the gradient is not scaled by (1 - momentum):
//! `g' = g + wd * p; v = mu * v + g'; p -= lr * lr_scale * v`.

use super::{NnError, NnResult, ParameterGroup};

/// Per-group SGD momentum buffers.
pub struct SgdState {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(group: &ParameterGroup, momentum: f32, weight_decay: f32) -> NnResult<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(NnError::BadConfig {
                op: "SgdState::new",
                reason: format!("momentum must be in [0,1), got {momentum}"),
            });
        }
        Ok(Self {
            momentum,
            weight_decay,
            velocity: group
                .params
                .iter()
                .map(|p| vec![0.0; p.borrow().numel()])
                .collect(),
        })
    }
}

/// One SGD step over the group. Every parameter must carry a finite gradient.
pub fn sgd_step(group: &ParameterGroup, state: &mut SgdState, base_lr: f32) -> NnResult<()> {
    if group.params.len() != state.velocity.len() {
        return Err(NnError::BadConfig {
            op: "sgd_step",
            reason: "optimizer state does not match the group".into(),
        });
    }
    let lr = base_lr * group.lr_scale;
    for (p, vel) in group.params.iter().zip(state.velocity.iter_mut()) {
        let mut t = p.borrow_mut();
        let name = p.name().to_string();
        let data_len = t.numel();
        let grad = t
            .grad()
            .ok_or_else(|| NnError::MissingGradient(name.clone()))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(name));
        }
        debug_assert_eq!(grad.len(), data_len);
        let grad = grad.to_vec();
        let data = t.data_mut();
        for i in 0..data.len() {
            let g = grad[i] + state.weight_decay * data[i];
            vel[i] = state.momentum * vel[i] + g;
            data[i] -= lr * vel[i];
        }
    }
    Ok(())
}

/// Per-group Adam moment buffers.
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(group: &ParameterGroup, beta1: f32, beta2: f32, eps: f32) -> NnResult<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(NnError::BadConfig {
                op: "AdamState::new",
                reason: format!("bad (beta1={beta1}, beta2={beta2}, eps={eps})"),
            });
        }
        let bufs = || {
            group
                .params
                .iter()
                .map(|p| vec![0.0; p.borrow().numel()])
                .collect()
        };
        Ok(Self {
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: bufs(),
            v: bufs(),
        })
    }

    pub fn with_defaults(group: &ParameterGroup) -> NnResult<Self> {
        Self::new(group, 0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam step over the group.
pub fn adam_step(group: &ParameterGroup, state: &mut AdamState, base_lr: f32) -> NnResult<()> {
    if group.params.len() != state.m.len() {
        return Err(NnError::BadConfig {
            op: "adam_step",
            reason: "optimizer state does not match the group".into(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let lr = base_lr * group.lr_scale;
    for ((p, m), v) in group
        .params
        .iter()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let mut tens = p.borrow_mut();
        let name = p.name().to_string();
        let grad = tens
            .grad()
            .ok_or_else(|| NnError::MissingGradient(name.clone()))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(name));
        }
        let grad = grad.to_vec();
        let data = tens.data_mut();
        for i in 0..data.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
