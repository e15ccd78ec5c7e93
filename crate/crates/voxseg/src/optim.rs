//! Adam with bias correction, plus the exponential learning-rate schedule.

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::scalar::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments, keyed like the parameter map.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam update over the supplied gradients. Parameters without a
/// gradient entry are left untouched. Rejects non-finite gradients, naming
/// the offending parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, grad) in grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let one_b1 = T::of_f64(1.0 - cfg.beta1);
    let one_b2 = T::of_f64(1.0 - cfg.beta2);
    let inv_bc1 = T::of_f64(1.0 / bc1);
    let inv_bc2 = T::of_f64(1.0 / bc2);
    let eps = T::of_f64(cfg.eps);
    let lr_t = T::of_f64(lr);

    for (name, grad) in grads {
        let tensor = params.get_mut(name)?;
        if tensor.numel() != grad.len() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient for `{name}` has {} values, parameter has {}", grad.len(), tensor.numel()),
            ));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); grad.len()]);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential schedule: lr0 * decay^epoch.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(value: f32) -> ModelParams<f32> {
        let mut p = ModelParams::empty();
        p.insert("w".into(), Tensor::scalar(value), true);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single_param(1.5);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0f32])]);
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Bias-corrected first step with constant unit gradient: m_hat = 1,
        // v_hat = 1, so the parameter moves by ~lr.
        let mut params = single_param(1.0);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![1.0f32])]);
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let mut params = single_param(0.3);
            let mut state = AdamState::new();
            for step in 0..25 {
                let g = ((step as f32) * 0.37).sin();
                let grads = BTreeMap::from([("w".to_string(), vec![g])]);
                adam_step(&mut params, &grads, &mut state, 0.01, &AdamConfig::default())
                    .unwrap();
            }
            params.get("w").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut params = single_param(1.0);
        let mut state = AdamState::new();
        let grads = BTreeMap::from([("w".to_string(), vec![f32::NAN])]);
        match adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at_epoch(1e-4, 0.97, 0), 1e-4);
        assert_eq!(lr_at_epoch(5e-3, 1.0, 17), 5e-3);
        let lr2 = lr_at_epoch(1e-4, 0.97, 2);
        assert!((lr2 - 9.409e-5).abs() < 1e-12, "{lr2}");
    }
}
