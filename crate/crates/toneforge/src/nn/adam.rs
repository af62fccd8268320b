//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::ParamTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    first_moment: Vec<S>,
    second_moment: Vec<S>,
    step_count: u64,
}

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    states: BTreeMap<String, AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            states: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = S::from_f64(lr);
    }

    /// One update over all given parameters; gradients are consumed (zeroed).
    pub fn step(&mut self, params: &mut [&mut ParamTensor<S>]) -> Result<()> {
        for p in params.iter_mut() {
            if p.is_frozen() {
                return Err(Error::FrozenViolation(p.name().to_string()));
            }
            if let Some(idx) = p.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at index {idx} in parameter '{}'",
                    p.name()
                )));
            }
            let state = self
                .states
                .entry(p.name().to_string())
                .or_insert_with(|| AdamState {
                    first_moment: vec![S::ZERO; p.len()],
                    second_moment: vec![S::ZERO; p.len()],
                    step_count: 0,
                });
            state.step_count += 1;
            let t = state.step_count as i32;
            let bc1 = S::ONE - powi(self.beta1, t);
            let bc2 = S::ONE - powi(self.beta2, t);

            let name = p.name().to_string();
            let n = p.len();
            // Split borrows: grads read, values written.
            for i in 0..n {
                let g = p.grad()[i];
                let m = &mut state.first_moment[i];
                *m = self.beta1 * *m + (S::ONE - self.beta1) * g;
                let v = &mut state.second_moment[i];
                *v = self.beta2 * *v + (S::ONE - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let upd = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                let val = &mut p.values_mut()[i];
                *val -= upd;
                if !val.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite value after update at index {i} in parameter '{name}'"
                    )));
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

fn powi<S: Scalar>(base: S, n: i32) -> S {
    let mut acc = S::ONE;
    for _ in 0..n {
        acc *= base;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p: ParamTensor<f64> = ParamTensor::from_values("p", &[2], vec![1.5, -0.5]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.values(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_magnitude_is_lr_times_sign() {
        for g in [3.0f64, -0.02] {
            let mut p: ParamTensor<f64> = ParamTensor::from_values("p", &[1], vec![0.0]).unwrap();
            p.grad_mut()[0] = g;
            let mut opt = Adam::new(0.01);
            opt.step(&mut [&mut p]).unwrap();
            // Bias-corrected first step: lr * g / (|g| + eps') ~ lr * sign(g).
            assert!((p.values()[0] + 0.01 * g.signum()).abs() < 1e-5, "{g}");
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_sign() {
        // Scalar simulation oracle: naive Adam recurrence computed inline.
        let g = 0.7f64;
        let (lr, b1, b2, eps) = (0.05f64, 0.9, 0.999, 1e-8);
        let mut p: ParamTensor<f64> = ParamTensor::from_values("p", &[1], vec![2.0]).unwrap();
        let mut opt = Adam::new(lr);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0, 2.0);
        let mut prev = p.values()[0];
        for t in 1..=25 {
            p.grad_mut()[0] = g;
            opt.step(&mut [&mut p]).unwrap();
            // Oracle step.
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!((p.values()[0] - theta).abs() < 1e-12);
            assert!(p.values()[0] < prev, "step {t} not monotone");
            prev = p.values()[0];
        }
    }

    #[test]
    fn non_finite_gradient_reports_parameter() {
        let mut p: ParamTensor<f64> =
            ParamTensor::from_values("layer3.w", &[1], vec![0.0]).unwrap();
        p.grad_mut()[0] = f64::NAN;
        let mut opt = Adam::new(0.01);
        match opt.step(&mut [&mut p]) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer3.w")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_parameter_rejected() {
        let mut p: ParamTensor<f64> = ParamTensor::from_values("enc.w", &[1], vec![0.0]).unwrap();
        p.freeze();
        let mut opt = Adam::new(0.01);
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(Error::FrozenViolation(name)) if name == "enc.w"
        ));
    }
}
