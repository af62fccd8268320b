//! Gated activation and ReLU, with backward passes.

use crate::scalar::Scalar;

/// h = tanh(pre_filter) * sigmoid(pre_gate), elementwise.
pub fn gated_activation<S: Scalar>(pre_filter: &[S], pre_gate: &[S]) -> Vec<S> {
    debug_assert_eq!(pre_filter.len(), pre_gate.len());
    pre_filter
        .iter()
        .zip(pre_gate.iter())
        .map(|(&f, &g)| f.tanh() * g.sigmoid())
        .collect()
}

/// Forward that also stores tanh/sigmoid values for the backward pass.
pub fn gated_forward_cached<S: Scalar>(
    pre_filter: &[S],
    pre_gate: &[S],
    tanh_out: &mut [S],
    sig_out: &mut [S],
    h_out: &mut [S],
) {
    for i in 0..pre_filter.len() {
        let t = pre_filter[i].tanh();
        let s = pre_gate[i].sigmoid();
        tanh_out[i] = t;
        sig_out[i] = s;
        h_out[i] = t * s;
    }
}

/// d_pf = d_h * s * (1 - t^2); d_pg = d_h * t * s * (1 - s).
pub fn gated_backward<S: Scalar>(
    d_h: &[S],
    tanh_vals: &[S],
    sig_vals: &[S],
    d_pre_filter: &mut [S],
    d_pre_gate: &mut [S],
) {
    for i in 0..d_h.len() {
        let t = tanh_vals[i];
        let s = sig_vals[i];
        d_pre_filter[i] = d_h[i] * s * (S::ONE - t * t);
        d_pre_gate[i] = d_h[i] * t * s * (S::ONE - s);
    }
}

pub fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x.iter_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
}

/// Masks upstream gradient by the sign of the pre-activation.
pub fn relu_backward<S: Scalar>(pre: &[S], d_out: &[S], d_pre: &mut [S]) {
    for i in 0..pre.len() {
        d_pre[i] = if pre[i] > S::ZERO { d_out[i] } else { S::ZERO };
    }
}
