use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean absolute error and its gradient with respect to `pred`.
///
/// The subgradient at ties is zero.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.check_same_shape(target, "l1_loss")?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("l1_loss: empty tensors".into()));
    }
    let n = T::from_f64(pred.len() as f64);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    let inv = T::one() / n;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        total += d.abs().as_f64();
        grad.push(if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        });
    }
    let value = T::from_f64(total / pred.len() as f64);
    Ok((value, Tensor::from_vec(pred.shape(), grad)?))
}

/// Proximal penalty `(mu / 2) * ||w - w_ref||^2` over flattened parameters.
///
/// Returns the penalty value and its gradient `mu * (w - w_ref)`.
pub fn prox_penalty<T: Scalar>(w: &[T], w_ref: &[T], mu: T) -> Result<(T, Vec<T>)> {
    if mu < T::zero() || !mu.is_finite() {
        return Err(Error::InvalidInput(format!(
            "prox_penalty: mu must be a finite non-negative number, got {mu:?}"
        )));
    }
    if w.len() != w_ref.len() {
        return Err(Error::Shape(format!(
            "prox_penalty: {} parameters vs {} reference values",
            w.len(),
            w_ref.len()
        )));
    }
    let mut sq = T::zero();
    let grad = w
        .iter()
        .zip(w_ref)
        .map(|(&a, &b)| {
            let d = a - b;
            sq += d * d;
            mu * d
        })
        .collect();
    let half = T::from_f64(0.5);
    Ok((half * mu * sq, grad))
}
