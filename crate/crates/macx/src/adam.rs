//! Adam optimizer with the standard bias-corrected update.

use crate::error::{Error, Result};
use crate::params::ParamRegistry;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Step counter; increments by exactly one per `adam_step`.
    pub t: u64,
    /// Per-parameter first/second moment accumulators, indexed like the
    /// registry and allocated on first touch.
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, moments: Vec::new() }
    }

    pub fn moment(&self, idx: usize) -> Option<&(Vec<T>, Vec<T>)> {
        self.moments.get(idx).and_then(Option::as_ref)
    }
}

/// One bias-corrected Adam step over every parameter that has a gradient:
///   m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Fails without touching anything if any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut ParamRegistry<T>, state: &mut AdamState<T>) -> Result<()> {
    for idx in 0..params.len() {
        if let Some(g) = params.value(idx).grad.as_deref() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: params.name(idx).to_string() });
            }
        }
    }

    state.t += 1;
    if state.moments.len() < params.len() {
        state.moments.resize(params.len(), None);
    }
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(state.t as i32));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.epsilon);

    for idx in 0..params.len() {
        let tensor = params.value_mut(idx);
        let n = tensor.numel();
        let (p, grad) = tensor.data_and_grad();
        let Some(grad) = grad else { continue };
        let (m, v) = state.moments[idx]
            .get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
