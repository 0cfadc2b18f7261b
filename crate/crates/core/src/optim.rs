//! The two parameter-update rules the meta-learner needs.
//!
//! Both are functional: they return fresh tensors and never mutate their
//! inputs, which is what lets the inner loop adapt coefficients without
//! touching meta-state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// `param − lr·grad`, as a new tensor.
pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("sgd_step: learning rate must be positive, got {lr}")));
    }
    if param.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "sgd_step: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let data = param
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| p - lr * g)
        .collect();
    Tensor::new(param.shape().to_vec(), data)
}

/// Moment accumulators and hyperparameters for one AdamW-managed tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    /// Zero-initialized state with the optimizer's canonical constants.
    pub fn new(shape: &[usize]) -> Self {
        AdamWState {
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(
    param: &Tensor,
    grad: &Tensor,
    state: AdamWState,
    lr: f64,
) -> Result<(Tensor, AdamWState)> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "adamw_step: learning rate must be positive, got {lr}"
        )));
    }
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::Dimension(format!(
            "adamw_step: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.first_moment.shape()
        )));
    }
    let AdamWState { first_moment, second_moment, step_count, beta1, beta2, epsilon, weight_decay } =
        state;
    let t = step_count + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let mut m = first_moment.data().to_vec();
    let mut v = second_moment.data().to_vec();
    let mut out = param.data().to_vec();
    for i in 0..out.len() {
        let g = grad.data()[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        out[i] -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * out[i]);
    }
    let shape = param.shape().to_vec();
    let next = AdamWState {
        first_moment: Tensor::new(shape.clone(), m)?,
        second_moment: Tensor::new(shape.clone(), v)?,
        step_count: t,
        beta1,
        beta2,
        epsilon,
        weight_decay,
    };
    Ok((Tensor::new(shape, out)?, next))
}
