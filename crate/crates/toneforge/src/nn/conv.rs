//! Dilated causal 1-D convolution, forward and backward.
//!
//! The streaming engine and the offline forward share `conv_ctx_forward`,
//! which reads an input that already carries (k-1)*d columns of left context.
//! Offline callers pad that context with zeros; the streaming path fills it
//! from per-layer history rings. Identical code means identical arithmetic,
//! so the two paths agree sample-for-sample.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// y += a * x, elementwise.
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], x: &[S], a: S) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * *xi;
    }
}

/// Dot product with eight independent accumulators. The summation order is
/// fixed by the code, so results are reproducible run to run.
#[inline]
pub fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [S::ZERO; 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = S::ZERO;
    for (xi, yi) in xc.remainder().iter().zip(yc.remainder()) {
        tail += *xi * *yi;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn sum<S: Scalar>(x: &[S]) -> S {
    let mut acc = [S::ZERO; 8];
    let mut xc = x.chunks_exact(8);
    for xs in &mut xc {
        for l in 0..8 {
            acc[l] += xs[l];
        }
    }
    let mut tail = S::ZERO;
    for xi in xc.remainder() {
        tail += *xi;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Context columns a dilated kernel needs to its left.
#[inline]
pub fn left_context(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation
}

/// out[c, t] = b[c] + sum_{i, j} w[c, i, j] * ext[i, t + d*j]
///
/// `ext` rows are `t_len + (k-1)*d` long: left context first, then the
/// current samples. `out` rows are `t_len` long.
pub fn conv_ctx_forward<S: Scalar>(
    out: &mut [S],
    ext: &[S],
    w: &[S],
    b: &[S],
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    t_len: usize,
) {
    let ext_cols = t_len + left_context(k, d);
    debug_assert_eq!(out.len(), c_out * t_len);
    debug_assert_eq!(ext.len(), c_in * ext_cols);
    debug_assert_eq!(w.len(), c_out * c_in * k);
    debug_assert_eq!(b.len(), c_out);

    for (c, out_row) in out.chunks_exact_mut(t_len).enumerate() {
        out_row.iter_mut().for_each(|o| *o = b[c]);
        for (i, ext_row) in ext.chunks_exact(ext_cols).enumerate() {
            let w_ci = &w[(c * c_in + i) * k..(c * c_in + i + 1) * k];
            for (j, &wj) in w_ci.iter().enumerate() {
                axpy(out_row, &ext_row[d * j..d * j + t_len], wj);
            }
        }
    }
}

/// Gradients for `conv_ctx_forward`. All outputs accumulate.
pub fn conv_ctx_backward<S: Scalar>(
    d_ext: &mut [S],
    d_w: &mut [S],
    d_b: &mut [S],
    ext: &[S],
    w: &[S],
    upstream: &[S],
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    t_len: usize,
) {
    let ext_cols = t_len + left_context(k, d);
    debug_assert_eq!(upstream.len(), c_out * t_len);
    debug_assert_eq!(d_ext.len(), c_in * ext_cols);

    for (c, up_row) in upstream.chunks_exact(t_len).enumerate() {
        d_b[c] += sum(up_row);
        for i in 0..c_in {
            let ext_row = &ext[i * ext_cols..(i + 1) * ext_cols];
            let d_ext_row = &mut d_ext[i * ext_cols..(i + 1) * ext_cols];
            for j in 0..k {
                let widx = (c * c_in + i) * k + j;
                d_w[widx] += dot(up_row, &ext_row[d * j..d * j + t_len]);
                axpy(&mut d_ext_row[d * j..d * j + t_len], up_row, w[widx]);
            }
        }
    }
}

fn check_shapes<S: Scalar>(
    x_len: usize,
    w: &[S],
    b: &[S],
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    t_len: usize,
) -> Result<()> {
    if k == 0 || d == 0 || t_len == 0 {
        return Err(Error::Contract(format!(
            "conv requires k >= 1, d >= 1, t >= 1 (got k={k}, d={d}, t={t_len})"
        )));
    }
    if x_len != c_in * t_len || w.len() != c_out * c_in * k || b.len() != c_out {
        return Err(Error::Contract(format!(
            "conv shape mismatch: x len {x_len} vs [{c_in}, {t_len}], w len {} vs [{c_out}, {c_in}, {k}], b len {} vs [{c_out}]",
            w.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Causal dilated convolution of `x: [c_in, t]` with implicit zero left
/// padding; returns `[c_out, t]`.
pub fn dilated_causal_conv<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    t_len: usize,
) -> Result<Vec<S>> {
    check_shapes(x.len(), w, b, c_out, c_in, k, d, t_len)?;
    let ctx = left_context(k, d);
    let ext_cols = t_len + ctx;
    let mut ext = vec![S::ZERO; c_in * ext_cols];
    for i in 0..c_in {
        ext[i * ext_cols + ctx..(i + 1) * ext_cols].copy_from_slice(&x[i * t_len..(i + 1) * t_len]);
    }
    let mut out = vec![S::ZERO; c_out * t_len];
    conv_ctx_forward(&mut out, &ext, w, b, c_out, c_in, k, d, t_len);
    Ok(out)
}

/// Analytic gradients of `dilated_causal_conv` with respect to x, w, b.
pub fn conv_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    upstream: &[S],
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    t_len: usize,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    check_shapes(x.len(), w, &vec![S::ZERO; c_out], c_out, c_in, k, d, t_len)?;
    if upstream.len() != c_out * t_len {
        return Err(Error::Contract(format!(
            "upstream len {} vs [{c_out}, {t_len}]",
            upstream.len()
        )));
    }
    let ctx = left_context(k, d);
    let ext_cols = t_len + ctx;
    let mut ext = vec![S::ZERO; c_in * ext_cols];
    for i in 0..c_in {
        ext[i * ext_cols + ctx..(i + 1) * ext_cols].copy_from_slice(&x[i * t_len..(i + 1) * t_len]);
    }
    let mut d_ext = vec![S::ZERO; c_in * ext_cols];
    let mut d_w = vec![S::ZERO; w.len()];
    let mut d_b = vec![S::ZERO; c_out];
    conv_ctx_backward(
        &mut d_ext, &mut d_w, &mut d_b, &ext, w, upstream, c_out, c_in, k, d, t_len,
    );
    let mut d_x = vec![S::ZERO; c_in * t_len];
    for i in 0..c_in {
        d_x[i * t_len..(i + 1) * t_len]
            .copy_from_slice(&d_ext[i * ext_cols + ctx..(i + 1) * ext_cols]);
    }
    Ok((d_x, d_w, d_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_running_sum() {
        // x=[1,2,3,4], w=[[ [1,1] ]], b=[0], d=1 -> [1,3,5,7]
        let y =
            dilated_causal_conv::<f64>(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], &[0.0], 1, 1, 2, 1, 4)
                .unwrap();
        assert_eq!(y, vec![1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn hand_example_pure_delay() {
        // w=[[ [1,0] ]], d=2: output is x delayed by 2.
        let y =
            dilated_causal_conv::<f64>(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0], &[0.0], 1, 1, 2, 2, 4)
                .unwrap();
        assert_eq!(y, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn hand_example_pointwise() {
        // K=1, w=2, b=1: y = 2x + 1.
        let y =
            dilated_causal_conv::<f64>(&[1.0, -1.0, 0.5], &[2.0], &[1.0], 1, 1, 1, 1, 3).unwrap();
        assert_eq!(y, vec![3.0, -1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let r = dilated_causal_conv::<f64>(&[1.0, 2.0], &[1.0], &[0.0], 1, 1, 1, 1, 3);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn bias_gradient_sums_upstream() {
        let x = [0.5, -1.0, 2.0, 0.0];
        let w = [0.3, -0.2];
        let up = [1.0, 2.0, 3.0, 4.0];
        let (_, _, d_b) = conv_backward::<f64>(&x, &w, &up, 1, 1, 2, 1, 4).unwrap();
        assert_eq!(d_b, vec![10.0]);
    }

    #[test]
    fn identity_conv_weight_gradient_sums_input() {
        // K=1 conv, upstream all ones: dW[c,i,0] = sum_t x[i,t].
        let x = [0.5, -1.0, 2.0];
        let w = [1.0];
        let up = [1.0, 1.0, 1.0];
        let (_, d_w, _) = conv_backward::<f64>(&x, &w, &up, 1, 1, 1, 1, 3).unwrap();
        assert!((d_w[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn causality_future_perturbation_does_not_leak() {
        let mut rng = crate::rng::Rng::new(11);
        let t = 32;
        let (c_in, c_out, k, d) = (2, 3, 3, 4);
        let x: Vec<f64> = (0..c_in * t).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.normal()).collect();
        let y = dilated_causal_conv(&x, &w, &b, c_out, c_in, k, d, t).unwrap();

        let t_perturb = 20;
        let mut x2 = x.clone();
        x2[t_perturb] += 5.0;
        let y2 = dilated_causal_conv(&x2, &w, &b, c_out, c_in, k, d, t).unwrap();
        for c in 0..c_out {
            for tt in 0..t_perturb {
                assert_eq!(y[c * t + tt], y2[c * t + tt], "leak at c={c}, t={tt}");
            }
            assert_ne!(y[c * t + t_perturb], y2[c * t + t_perturb]);
        }
    }

    #[test]
    fn linear_in_input_and_weights() {
        // Superposition with zero bias, f64.
        let mut rng = crate::rng::Rng::new(3);
        let t = 24;
        let (c_in, c_out, k, d) = (2, 2, 3, 2);
        let gen = |rng: &mut crate::rng::Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.normal()).collect()
        };
        let x1 = gen(&mut rng, c_in * t);
        let x2 = gen(&mut rng, c_in * t);
        let w = gen(&mut rng, c_out * c_in * k);
        let b = vec![0.0; c_out];
        let y1 = dilated_causal_conv(&x1, &w, &b, c_out, c_in, k, d, t).unwrap();
        let y2 = dilated_causal_conv(&x2, &w, &b, c_out, c_in, k, d, t).unwrap();
        let xs: Vec<f64> = x1.iter().zip(&x2).map(|(a, c)| 2.0 * a - 3.0 * c).collect();
        let ys = dilated_causal_conv(&xs, &w, &b, c_out, c_in, k, d, t).unwrap();
        for i in 0..ys.len() {
            assert!((ys[i] - (2.0 * y1[i] - 3.0 * y2[i])).abs() < 1e-9);
        }
    }
}
