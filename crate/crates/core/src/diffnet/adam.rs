use serde::{Deserialize, Serialize};

use super::layers::ParameterSet;
use super::tensor::Real;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|e| vec![T::zero(); e.tensor.len()])
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Gradients are validated before anything is modified; a non-finite gradient
/// leaves both parameters and state untouched.
pub fn adam_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &ParameterSet<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.tensor.shape() != g.tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: gradient for {} has shape {:?}, parameter has {:?}",
                p.name,
                g.tensor.shape(),
                p.tensor.shape()
            )));
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let correction1 = T::from_f64_lossy(1.0 - beta1.powi(t));
    let correction2 = T::from_f64_lossy(1.0 - beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));

    for (idx, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        for (((theta, &grad), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.tensor.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * grad;
            *v = b2 * *v + (T::one() - b2) * grad * grad;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
