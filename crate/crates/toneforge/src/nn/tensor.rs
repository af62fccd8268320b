//! Named parameter tensors with gradient storage.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// A learnable array with its gradient buffer. Shape is immutable after
/// creation; values and grad always have identical length.
#[derive(Debug, Clone)]
pub struct ParamTensor<S: Scalar> {
    name: String,
    shape: Vec<usize>,
    values: Vec<S>,
    grad: Vec<S>,
    frozen: bool,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![S::ZERO; n],
            grad: vec![S::ZERO; n],
            frozen: false,
        }
    }

    /// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut t = Self::zeros(name, shape);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in t.values.iter_mut() {
            *v = S::from_f64(rng.range_f64(-bound, bound));
        }
        t
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Contract(format!(
                "tensor values length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![S::ZERO; n],
            values,
            frozen: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn grad(&self) -> &[S] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [S] {
        &mut self.grad
    }

    /// Simultaneous read of values and write of grads.
    pub fn values_and_grad_mut(&mut self) -> (&[S], &mut [S]) {
        (&self.values, &mut self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = S::ZERO);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value in parameter '{}'",
                self.name
            )));
        }
        Ok(())
    }
}
