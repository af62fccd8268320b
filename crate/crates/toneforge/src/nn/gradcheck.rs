//! Gradient verification by central finite differences.
//!
//! The checker perturbs every parameter entry of a target and compares the
//! analytic gradient against (f(p+eps) - f(p-eps)) / 2eps on a scalar loss.
//! It never calls the backward pass it is judging to compute the reference.

use crate::error::{Error, Result};
use crate::nn::tensor::ParamTensor;
use crate::scalar::Scalar;

/// Maximum parameter count grad_check will walk.
pub const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

/// Absolute floor for the relative-error denominator; see `grad_check`.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-6;

/// Anything differentiable with enumerable parameters and a scalar loss.
pub trait GradCheckTarget<S: Scalar> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>>;
    /// Forward only.
    fn loss(&mut self) -> S;
    /// Forward + backward; fills parameter grads (from zero) and returns the loss.
    fn loss_and_grad(&mut self) -> S;
}

/// Worst relative error between analytic and finite-difference gradients.
pub fn grad_check<S: Scalar, T: GradCheckTarget<S>>(target: &mut T, eps: f64) -> Result<f64> {
    let total: usize = target.params_mut().iter().map(|p| p.len()).sum();
    if total > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::Contract(format!(
            "grad_check limited to {GRAD_CHECK_MAX_PARAMS} parameters, got {total}"
        )));
    }

    for p in target.params_mut() {
        p.zero_grad();
    }
    let _ = target.loss_and_grad();
    let analytic: Vec<Vec<S>> = target
        .params_mut()
        .iter()
        .map(|p| p.grad().to_vec())
        .collect();

    let n_params = target.params_mut().len();
    let eps_s = S::from_f64(eps);
    let mut worst = 0.0f64;
    for pi in 0..n_params {
        for i in 0..target.params_mut()[pi].len() {
            let orig = target.params_mut()[pi].values()[i];
            target.params_mut()[pi].values_mut()[i] = orig + eps_s;
            let up = target.loss().to_f64();
            target.params_mut()[pi].values_mut()[i] = orig - eps_s;
            let down = target.loss().to_f64();
            target.params_mut()[pi].values_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][i].to_f64();
            // Floor the denominator: for gradient entries far below the loss
            // scale, central differences bottom out at cancellation noise
            // (~eps_mach * |loss| / (2 eps)), which is measurement error, not
            // gradient error.
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_DENOM_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
