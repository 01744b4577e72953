use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::Parameter;
use crate::tensor::{Scalar, Tensor};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_param(param: &Parameter<T>) -> Self {
        AdamState {
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` from its populated gradient.
///
/// Running-statistic parameters are left untouched.
pub fn adam_step<T: Scalar>(
    param: &mut Parameter<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if !param.tag.is_trainable() {
        return Ok(());
    }
    if state.m.shape() != param.value.shape() || state.v.shape() != param.value.shape() {
        return Err(Error::Shape(format!(
            "adam: state shape {:?} does not match parameter {:?}",
            state.m.shape(),
            param.value.shape()
        )));
    }
    if !param.grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient of {:?} layer {} contains non-finite values",
            param.tag.kind, param.tag.layer_index
        )));
    }
    state.step += 1;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(state.step as i32);
    let bc2 = one - b2.powi(state.step as i32);
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let g = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, p) in param.value.data_mut().iter_mut().enumerate() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
