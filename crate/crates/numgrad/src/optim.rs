//! Adagrad and Adam parameter updates.
//!
//! Both optimizers update only the parameters present in the gradient map,
//! so frozen tensors (which never appear in a graph's gradients) are left
//! untouched. Accumulators are allocated lazily the first time a parameter
//! is seen and always match its shape.

use std::collections::BTreeMap;

use crate::error::{NumgradError, Result};
use crate::graph::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Squared-gradient accumulators for Adagrad.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub lr: f64,
    pub eps: f64,
    pub accum: BTreeMap<String, Tensor>,
}

impl AdagradState {
    pub fn new(lr: f64) -> Self {
        AdagradState {
            lr,
            eps: DEFAULT_EPSILON,
            accum: BTreeMap::new(),
        }
    }
}

/// accum += g²; param −= lr · g / (√accum + ε)
pub fn step_adagrad(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdagradState,
) -> Result<()> {
    for (name, grad) in grads {
        let param = store.get_mut(name)?;
        if grad.shape() != param.shape() {
            return Err(NumgradError::StateShapeMismatch { name: name.clone() });
        }
        let accum = state
            .accum
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if accum.shape() != param.shape() {
            return Err(NumgradError::StateShapeMismatch { name: name.clone() });
        }
        for (i, &g) in grad.data().iter().enumerate() {
            let a = &mut accum.data_mut()[i];
            *a += g * g;
            let update = state.lr * g / (a.sqrt() + state.eps);
            param.data_mut()[i] -= update;
        }
        if !param.all_finite() {
            return Err(NumgradError::NonFiniteUpdate { name: name.clone() });
        }
    }
    Ok(())
}

/// Bias-corrected first/second moment estimates for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            eps: DEFAULT_EPSILON,
            beta1: 0.9,
            beta2: 0.999,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Standard bias-corrected moment update; increments the step counter once
/// per call.
pub fn step_adam(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (name, grad) in grads {
        let param = store.get_mut(name)?;
        if grad.shape() != param.shape() {
            return Err(NumgradError::StateShapeMismatch { name: name.clone() });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() || v.shape() != param.shape() {
            return Err(NumgradError::StateShapeMismatch { name: name.clone() });
        }
        for (i, &g) in grad.data().iter().enumerate() {
            let mi = &mut m.data_mut()[i];
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            let vi = &mut v.data_mut()[i];
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            param.data_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        if !param.all_finite() {
            return Err(NumgradError::NonFiniteUpdate { name: name.clone() });
        }
    }
    Ok(())
}
