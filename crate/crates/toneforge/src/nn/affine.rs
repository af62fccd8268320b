//! Dense affine layer for the small vector-to-vector networks
//! (hyper layers, FiLM generators, encoder projection).

use crate::nn::conv::dot;
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// y = W x + b with W: [out, in].
#[derive(Debug, Clone)]
pub struct Affine<S: Scalar> {
    pub w: ParamTensor<S>,
    pub b: ParamTensor<S>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<S: Scalar> Affine<S> {
    pub fn kaiming(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Affine {
            w: ParamTensor::kaiming_uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng),
            b: ParamTensor::zeros(format!("{name}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias; the layer outputs b (zeros) for any input.
    pub fn zeroed(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Affine {
            w: ParamTensor::zeros(format!("{name}.w"), &[out_dim, in_dim]),
            b: ParamTensor::zeros(format!("{name}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[S], out: &mut [S]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        let w = self.w.values();
        let b = self.b.values();
        for o in 0..self.out_dim {
            out[o] = b[o] + dot(&w[o * self.in_dim..(o + 1) * self.in_dim], x);
        }
    }

    /// Accumulates parameter gradients; optionally accumulates into d_x.
    pub fn backward(&mut self, x: &[S], d_out: &[S], mut d_x: Option<&mut [S]>) {
        let in_dim = self.in_dim;
        let w = self.w.values();
        if let Some(dx) = d_x.as_deref_mut() {
            for o in 0..self.out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let g = d_out[o];
                for i in 0..in_dim {
                    dx[i] += row[i] * g;
                }
            }
        }
        let dw = self.w.grad_mut();
        for o in 0..self.out_dim {
            let g = d_out[o];
            let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                drow[i] += g * x[i];
            }
        }
        let db = self.b.grad_mut();
        for o in 0..self.out_dim {
            db[o] += d_out[o];
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        vec![&mut self.w, &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_hand_computation() {
        let mut a: Affine<f64> = Affine::zeroed("t", 2, 2);
        a.w.values_mut().copy_from_slice(&[1.0, 2.0, -1.0, 0.5]);
        a.b.values_mut().copy_from_slice(&[0.1, -0.2]);
        let mut out = [0.0; 2];
        a.forward(&[3.0, 4.0], &mut out);
        assert_eq!(out, [11.1, -1.2]);
    }

    #[test]
    fn backward_gradients() {
        let mut a: Affine<f64> = Affine::zeroed("t", 2, 1);
        a.w.values_mut().copy_from_slice(&[2.0, -3.0]);
        let x = [0.5, 1.5];
        let mut dx = [0.0; 2];
        a.backward(&x, &[2.0], Some(&mut dx));
        assert_eq!(dx, [4.0, -6.0]);
        assert_eq!(a.w.grad(), &[1.0, 3.0]);
        assert_eq!(a.b.grad(), &[2.0]);
    }
}
