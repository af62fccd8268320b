//! Gradient verification battery: finite-difference checks over the shipped
//! forward/backward code at f64 precision, from a single conv up to the full
//! conditioned generator. Backs the `gradcheck` CLI command and the test
//! suites.

use crate::cond::{Conditioning, FilmGenerator, Granularity, HyperLayer, HyperNetwork};
use crate::error::Result;
use crate::gcn::{
    backward_train, dilation_pattern, forward_train, CondMode, GcnConfig, GcnGrads, GcnModel,
    LayerDescriptor, LayerRole,
};
use crate::nn::conv::{conv_backward, dilated_causal_conv};
use crate::nn::gradcheck::{grad_check, GradCheckTarget};
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;
use crate::train::{
    add_base_grads, route_hyper_grads, training_loss, training_loss_grad, LossWeights,
};

/// Smooth loss for checking: pre-emphasized ESR only (the MAE term has a
/// kink at zero residual that finite differences cannot cross cleanly).
fn check_weights() -> LossWeights<f64> {
    LossWeights::new(1.0, 0.0, 0.95)
}

/// A single dilated conv against a squared loss.
struct ConvTarget {
    w: ParamTensor<f64>,
    b: ParamTensor<f64>,
    dims: (usize, usize, usize, usize), // c_out, c_in, k, d
    x: Vec<f64>,
    target: Vec<f64>,
    t_len: usize,
}

impl ConvTarget {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let (c_out, c_in, k, d) = (3, 2, 3, 2);
        let t_len = 24;
        ConvTarget {
            w: ParamTensor::kaiming_uniform("w", &[c_out, c_in, k], c_in * k, &mut rng),
            b: ParamTensor::from_values(
                "b",
                &[c_out],
                (0..c_out).map(|_| rng.normal() * 0.1).collect(),
            )
            .unwrap(),
            dims: (c_out, c_in, k, d),
            x: (0..c_in * t_len).map(|_| rng.normal()).collect(),
            target: (0..c_out * t_len).map(|_| rng.normal()).collect(),
            t_len,
        }
    }

    fn forward(&self) -> Vec<f64> {
        let (c_out, c_in, k, d) = self.dims;
        dilated_causal_conv(
            &self.x,
            self.w.values(),
            self.b.values(),
            c_out,
            c_in,
            k,
            d,
            self.t_len,
        )
        .unwrap()
    }
}

impl GradCheckTarget<f64> for ConvTarget {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        vec![&mut self.w, &mut self.b]
    }

    fn loss(&mut self) -> f64 {
        let y = self.forward();
        let n = y.len() as f64;
        y.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    fn loss_and_grad(&mut self) -> f64 {
        let (c_out, c_in, k, d) = self.dims;
        let y = self.forward();
        let n = y.len() as f64;
        let upstream: Vec<f64> = y
            .iter()
            .zip(&self.target)
            .map(|(a, b)| 2.0 * (a - b) / n)
            .collect();
        let (_, d_w, d_b) = conv_backward(
            &self.x,
            self.w.values(),
            &upstream,
            c_out,
            c_in,
            k,
            d,
            self.t_len,
        )
        .unwrap();
        for (g, v) in self.w.grad_mut().iter_mut().zip(&d_w) {
            *g += v;
        }
        for (g, v) in self.b.grad_mut().iter_mut().zip(&d_b) {
            *g += v;
        }
        y.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// A single conv whose weights are modulated by one hyper layer, end to end.
struct ModulatedConvTarget {
    w: ParamTensor<f64>,
    b: ParamTensor<f64>,
    hyper: HyperLayer<f64>,
    phi: Vec<f64>,
    x: Vec<f64>,
    target: Vec<f64>,
    t_len: usize,
}

impl ModulatedConvTarget {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let (c_out, c_in, k) = (3, 2, 2);
        let d_e = 5;
        let desc = LayerDescriptor {
            block: 0,
            role: LayerRole::Dilated,
            w_shape: [c_out, c_in, k],
            b_len: c_out,
        };
        let mut hyper = HyperLayer::init(0, desc, d_e, 6, Granularity::PerChannel, &mut rng);
        // Nonzero output stage so the modulation path carries signal.
        for v in hyper.l2.w.values_mut() {
            *v = rng.normal() * 0.2;
        }
        for v in hyper.l2.b.values_mut() {
            *v = rng.normal() * 0.05;
        }
        let t_len = 20;
        ModulatedConvTarget {
            w: ParamTensor::kaiming_uniform("w", &[c_out, c_in, k], c_in * k, &mut rng),
            b: ParamTensor::from_values(
                "b",
                &[c_out],
                (0..c_out).map(|_| rng.normal() * 0.1).collect(),
            )
            .unwrap(),
            hyper,
            phi: (0..d_e).map(|_| rng.normal()).collect(),
            x: (0..c_in * t_len).map(|_| rng.normal()).collect(),
            target: (0..c_out * t_len).map(|_| rng.normal()).collect(),
            t_len,
        }
    }

    fn forward(&self) -> Vec<f64> {
        let shape = self.hyper.target.w_shape;
        let out = self.hyper.forward(&self.phi);
        let mut w_mod = vec![0.0; self.w.len()];
        let mut b_mod = vec![0.0; self.b.len()];
        crate::cond::modulate_weights(
            self.w.values(),
            self.b.values(),
            &out.dw,
            &out.db,
            shape,
            &mut w_mod,
            &mut b_mod,
        )
        .unwrap();
        dilated_causal_conv(
            &self.x, &w_mod, &b_mod, shape[0], shape[1], shape[2], 1, self.t_len,
        )
        .unwrap()
    }
}

impl GradCheckTarget<f64> for ModulatedConvTarget {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut p = vec![&mut self.w, &mut self.b];
        p.extend(self.hyper.l1.params_mut());
        p.extend(self.hyper.l2.params_mut());
        p
    }

    fn loss(&mut self) -> f64 {
        let y = self.forward();
        let n = y.len() as f64;
        y.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    fn loss_and_grad(&mut self) -> f64 {
        let shape = self.hyper.target.w_shape;
        let out = self.hyper.forward(&self.phi);
        let mut w_mod = vec![0.0; self.w.len()];
        let mut b_mod = vec![0.0; self.b.len()];
        crate::cond::modulate_weights(
            self.w.values(),
            self.b.values(),
            &out.dw,
            &out.db,
            shape,
            &mut w_mod,
            &mut b_mod,
        )
        .unwrap();
        let y = dilated_causal_conv(
            &self.x, &w_mod, &b_mod, shape[0], shape[1], shape[2], 1, self.t_len,
        )
        .unwrap();
        let n = y.len() as f64;
        let upstream: Vec<f64> = y
            .iter()
            .zip(&self.target)
            .map(|(a, b)| 2.0 * (a - b) / n)
            .collect();
        let (_, d_w_mod, d_b_mod) = conv_backward(
            &self.x, &w_mod, &upstream, shape[0], shape[1], shape[2], 1, self.t_len,
        )
        .unwrap();

        let mut d_dw = vec![0.0; out.dw.len()];
        let mut d_db = vec![0.0; out.db.len()];
        {
            let (w_vals, w_grad) = self.w.values_and_grad_mut();
            let (b_vals, b_grad) = self.b.values_and_grad_mut();
            crate::cond::modulate_backward(
                w_vals, b_vals, &out.dw, &out.db, shape, &d_w_mod, &d_b_mod, w_grad, b_grad,
                &mut d_dw, &mut d_db,
            );
        }
        self.hyper.backward(&self.phi, &out, &d_dw, &d_db);
        y.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// The full conditioned generator against the pre-emphasized ESR loss,
/// exercising the exact code paths the trainer uses.
struct PipelineTarget {
    gcn: GcnModel<f64>,
    cond: Conditioning<f64>,
    phi: Vec<f64>,
    x: Vec<f64>,
    target: Vec<f64>,
    weights: LossWeights<f64>,
}

impl PipelineTarget {
    fn new(mode: CondMode, seed: u64) -> Self {
        let rng = Rng::new(seed);
        let config = GcnConfig {
            num_blocks: 2,
            channels: 3,
            kernel_size: 2,
            skip_channels: 3,
            dilations: dilation_pattern(2, 2),
            cond_mode: mode,
        };
        let gcn = GcnModel::init(config, &mut rng.derive(1)).unwrap();
        let d_e = 4;
        let mut cond = match mode {
            CondMode::None => Conditioning::None,
            CondMode::Film => Conditioning::Film(FilmGenerator::init(2, 3, d_e)),
            CondMode::Hypernet => Conditioning::Hyper(HyperNetwork::init(
                &gcn,
                d_e,
                5,
                Granularity::PerChannel,
                &mut rng.derive(2),
            )),
        };
        // Move conditioning off its identity init so its gradients matter.
        let mut prng = rng.derive(3);
        for p in cond.params_mut() {
            for v in p.values_mut() {
                *v += prng.normal() * 0.1;
            }
        }
        let t = 40;
        PipelineTarget {
            gcn,
            cond,
            phi: (0..d_e).map(|_| prng.normal()).collect(),
            x: (0..t).map(|_| prng.normal() * 0.5).collect(),
            target: (0..t).map(|_| prng.normal() * 0.5).collect(),
            weights: check_weights(),
        }
    }

    fn forward_loss(&self) -> f64 {
        let output = match &self.cond {
            Conditioning::None => {
                forward_train(&self.gcn, &self.gcn.config, None, &self.x)
                    .unwrap()
                    .output
            }
            Conditioning::Film(fg) => {
                let params = fg.params_for(&self.phi).unwrap();
                forward_train(&self.gcn, &self.gcn.config, Some(&params), &self.x)
                    .unwrap()
                    .output
            }
            Conditioning::Hyper(h) => {
                let outs = h.forward_all(&self.phi).unwrap();
                let mut baked = crate::cond::BakedWeights::from_base(&self.gcn, 0);
                baked.apply_deltas(&self.gcn, &outs).unwrap();
                forward_train(&baked, &self.gcn.config, None, &self.x)
                    .unwrap()
                    .output
            }
        };
        training_loss(&self.target, &output, &self.weights).unwrap()
    }
}

impl GradCheckTarget<f64> for PipelineTarget {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        let mut p = self.gcn.params_mut();
        p.extend(self.cond.params_mut());
        p
    }

    fn loss(&mut self) -> f64 {
        self.forward_loss()
    }

    fn loss_and_grad(&mut self) -> f64 {
        let mut grads =
            GcnGrads::<f64>::zeros(&self.gcn.config, matches!(self.cond, Conditioning::Film(_)));
        let loss;
        match &mut self.cond {
            Conditioning::None => {
                let cache = forward_train(&self.gcn, &self.gcn.config, None, &self.x).unwrap();
                let (l, d_pred) =
                    training_loss_grad(&self.target, &cache.output, &self.weights).unwrap();
                loss = l;
                backward_train(
                    &self.gcn,
                    &self.gcn.config,
                    None,
                    &cache,
                    &d_pred,
                    &mut grads,
                );
                add_base_grads(&mut self.gcn, &grads, false);
            }
            Conditioning::Film(fg) => {
                let params = fg.params_for(&self.phi).unwrap();
                let cache =
                    forward_train(&self.gcn, &self.gcn.config, Some(&params), &self.x).unwrap();
                let (l, d_pred) =
                    training_loss_grad(&self.target, &cache.output, &self.weights).unwrap();
                loss = l;
                backward_train(
                    &self.gcn,
                    &self.gcn.config,
                    Some(&params),
                    &cache,
                    &d_pred,
                    &mut grads,
                );
                add_base_grads(&mut self.gcn, &grads, false);
                fg.backward(&self.phi, grads.film.as_ref().unwrap());
            }
            Conditioning::Hyper(h) => {
                let outs = h.forward_all(&self.phi).unwrap();
                let mut baked = crate::cond::BakedWeights::from_base(&self.gcn, 0);
                baked.apply_deltas(&self.gcn, &outs).unwrap();
                let cache = forward_train(&baked, &self.gcn.config, None, &self.x).unwrap();
                let (l, d_pred) =
                    training_loss_grad(&self.target, &cache.output, &self.weights).unwrap();
                loss = l;
                backward_train(&baked, &self.gcn.config, None, &cache, &d_pred, &mut grads);
                add_base_grads(&mut self.gcn, &grads, true);
                let delta_grads = route_hyper_grads(&mut self.gcn, &grads, &outs);
                h.backward_all(&self.phi, &outs, &delta_grads);
            }
        }
        loss
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_relative_error: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckSummary {
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.cases
            .iter()
            .all(|c| c.max_relative_error < c.threshold)
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{:<28} max_rel_err {:.3e}  (threshold {:.0e})  {}",
                c.name,
                c.max_relative_error,
                c.threshold,
                if c.max_relative_error < c.threshold {
                    "ok"
                } else {
                    "FAIL"
                }
            );
        }
        out
    }
}

/// Run the finite-difference battery over the given seeds, reporting the
/// worst relative error per case family.
pub fn gradient_battery(seeds: &[u64]) -> Result<GradCheckSummary> {
    let eps = 1e-5;
    let mut conv_worst = 0.0f64;
    let mut modconv_worst = 0.0f64;
    let mut plain_worst = 0.0f64;
    let mut film_worst = 0.0f64;
    let mut hyper_worst = 0.0f64;
    for &seed in seeds {
        conv_worst = conv_worst.max(grad_check(&mut ConvTarget::new(seed), 1e-6)?);
        modconv_worst = modconv_worst.max(grad_check(&mut ModulatedConvTarget::new(seed), eps)?);
        plain_worst = plain_worst.max(grad_check(
            &mut PipelineTarget::new(CondMode::None, seed),
            eps,
        )?);
        film_worst = film_worst.max(grad_check(
            &mut PipelineTarget::new(CondMode::Film, seed),
            eps,
        )?);
        hyper_worst = hyper_worst.max(grad_check(
            &mut PipelineTarget::new(CondMode::Hypernet, seed),
            eps,
        )?);
    }
    Ok(GradCheckSummary {
        cases: vec![
            GradCheckCase {
                name: "conv+squared-loss".into(),
                max_relative_error: conv_worst,
                threshold: 1e-6,
            },
            GradCheckCase {
                name: "hyper-modulated-conv".into(),
                max_relative_error: modconv_worst,
                threshold: 1e-4,
            },
            GradCheckCase {
                name: "gcn-2block".into(),
                max_relative_error: plain_worst,
                threshold: 1e-4,
            },
            GradCheckCase {
                name: "gcn+film-end-to-end".into(),
                max_relative_error: film_worst,
                threshold: 1e-4,
            },
            GradCheckCase {
                name: "gcn+hypernet-end-to-end".into(),
                max_relative_error: hyper_worst,
                threshold: 1e-4,
            },
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_on_a_few_seeds() {
        let summary = gradient_battery(&[1, 2, 3]).unwrap();
        assert!(summary.passed(), "\n{}", summary.to_text());
    }

    #[test]
    fn battery_thresholds_are_spec_values() {
        let summary = gradient_battery(&[5]).unwrap();
        let by_name = |n: &str| {
            summary
                .cases
                .iter()
                .find(|c| c.name == n)
                .map(|c| c.threshold)
                .unwrap()
        };
        assert_eq!(by_name("conv+squared-loss"), 1e-6);
        assert_eq!(by_name("gcn-2block"), 1e-4);
        assert_eq!(by_name("gcn+hypernet-end-to-end"), 1e-4);
    }
}
