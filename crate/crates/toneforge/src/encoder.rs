//! The tone embedding encoder: log-mel statistics feeding a small projection
//! MLP, pretrained with a tone-classification objective on the synthetic
//! corpus and frozen before generator training.

use crate::audio::AudioBuffer;
use crate::cond::ToneEmbedding;
use crate::error::{Error, Result};
use crate::mel::{log_mel_stats, MelConfig};
use crate::nn::adam::Adam;
use crate::nn::affine::Affine;
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;

/// Minimum reference duration for encoding.
pub const MIN_REFERENCE_SECONDS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub mel: MelConfig,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mel: MelConfig::default(),
            hidden: 128,
            embedding_dim: 64,
        }
    }
}

/// Projection MLP with feature standardization. Once frozen, no optimizer
/// step may touch it.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub feat_mean: Vec<f32>,
    pub feat_std: Vec<f32>,
    pub l1: Affine<f32>,
    pub l2: Affine<f32>,
    frozen: bool,
}

impl EncoderWeights {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Self {
        let feat = config.mel.feature_len();
        EncoderWeights {
            feat_mean: vec![0.0; feat],
            feat_std: vec![1.0; feat],
            l1: Affine::kaiming("enc.l1", feat, config.hidden, rng),
            l2: Affine::kaiming("enc.l2", config.hidden, config.embedding_dim, rng),
            config,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.l1.w.freeze();
        self.l1.b.freeze();
        self.l2.w.freeze();
        self.l2.b.freeze();
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<f32>> {
        let mut p = self.l1.params_mut();
        p.extend(self.l2.params_mut());
        p
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<f32>> {
        vec![&self.l1.w, &self.l1.b, &self.l2.w, &self.l2.b]
    }

    fn standardize(&self, features: &[f64]) -> Vec<f32> {
        features
            .iter()
            .enumerate()
            .map(|(i, &f)| ((f as f32) - self.feat_mean[i]) / self.feat_std[i])
            .collect()
    }

    /// Pre-normalization projection of a standardized feature vector.
    fn project(&self, z: &[f32]) -> Vec<f32> {
        let mut hidden = vec![0.0f32; self.config.hidden];
        self.l1.forward(z, &mut hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut e = vec![0.0f32; self.config.embedding_dim];
        self.l2.forward(&hidden, &mut e);
        e
    }
}

/// Extract a unit-norm tone embedding from reference audio.
pub fn encode(audio: &AudioBuffer, enc: &EncoderWeights) -> Result<ToneEmbedding> {
    if audio.duration_s() < MIN_REFERENCE_SECONDS {
        return Err(Error::Contract(format!(
            "reference audio is {:.3} s, need >= {MIN_REFERENCE_SECONDS} s",
            audio.duration_s()
        )));
    }
    let features = log_mel_stats(audio, &enc.config.mel)?;
    let z = enc.standardize(&features);
    let e = enc.project(&z);
    ToneEmbedding::new(e, None)
}

/// One labeled clip for pretraining: pooled log-mel features plus its preset
/// label. `heldout` samples are excluded from fitting and used only for the
/// reported accuracy.
#[derive(Debug, Clone)]
pub struct EncoderSample {
    pub preset_idx: usize,
    pub features: Vec<f64>,
    pub heldout: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gaussian noise added to standardized features during fitting; keeps
    /// the classifier from memorizing per-clip idiosyncrasies.
    pub feature_noise: f64,
    /// L2 penalty on weight matrices.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            feature_noise: 0.3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub heldout_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_presets: usize,
}

/// Train the projection with a linear classification head over preset ids
/// (softmax cross-entropy), discard the head, freeze the weights, and report
/// held-out accuracy.
pub fn pretrain_encoder(
    samples: &[EncoderSample],
    n_presets: usize,
    config: EncoderConfig,
    opts: &PretrainOptions,
) -> Result<(EncoderWeights, PretrainReport)> {
    if n_presets < 2 {
        return Err(Error::Contract(format!(
            "encoder pretraining needs >= 2 presets, got {n_presets}"
        )));
    }
    let train_idx: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].heldout)
        .collect();
    let held_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].heldout).collect();
    if train_idx.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let mut per_preset = vec![0usize; n_presets];
    for &i in &train_idx {
        let p = samples[i].preset_idx;
        if p >= n_presets {
            return Err(Error::Contract(format!(
                "preset index {p} out of range {n_presets}"
            )));
        }
        per_preset[p] += 1;
    }
    if per_preset.iter().any(|&c| c < 2) {
        return Err(Error::Contract(
            "encoder pretraining needs >= 2 clips per preset".into(),
        ));
    }

    let feat_len = config.mel.feature_len();
    for s in samples {
        if s.features.len() != feat_len {
            return Err(Error::Contract(format!(
                "feature length {} != expected {feat_len}",
                s.features.len()
            )));
        }
    }

    let rng = Rng::new(opts.seed);
    let mut enc = EncoderWeights::init(config, &mut rng.derive(1));

    // Center each feature, but scale by a single global std: per-feature
    // variance equalization would blow up noise-dominated dimensions and
    // bury the coherent tone signal.
    let n_train = train_idx.len() as f64;
    let mut var_sum = 0.0f64;
    for j in 0..feat_len {
        let mean = train_idx
            .iter()
            .map(|&i| samples[i].features[j])
            .sum::<f64>()
            / n_train;
        let var = train_idx
            .iter()
            .map(|&i| {
                let d = samples[i].features[j] - mean;
                d * d
            })
            .sum::<f64>()
            / n_train;
        enc.feat_mean[j] = mean as f32;
        var_sum += var;
    }
    let global_std = ((var_sum / feat_len as f64).sqrt().max(1e-6)) as f32;
    enc.feat_std.iter_mut().for_each(|s| *s = global_std);

    let standardized: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| enc.standardize(&s.features))
        .collect();

    let mut head = Affine::<f32>::kaiming(
        "enc.head",
        enc.config.embedding_dim,
        n_presets,
        &mut rng.derive(2),
    );
    let mut opt = Adam::new(opts.lr);
    let mut order = train_idx.clone();
    let mut shuffle_rng = rng.derive(3);
    let mut noise_rng = rng.derive(4);
    let mut final_loss = 0.0f64;

    for _epoch in 0..opts.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            for &si in chunk {
                let z: Vec<f32> = standardized[si]
                    .iter()
                    .map(|&v| v + (opts.feature_noise * noise_rng.normal()) as f32)
                    .collect();
                let z = &z;
                let label = samples[si].preset_idx;

                let mut hidden = vec![0.0f32; enc.config.hidden];
                enc.l1.forward(z, &mut hidden);
                let pre_tanh = hidden.clone();
                for h in hidden.iter_mut() {
                    *h = h.tanh();
                }
                let mut e = vec![0.0f32; enc.config.embedding_dim];
                enc.l2.forward(&hidden, &mut e);
                let mut logits = vec![0.0f32; n_presets];
                head.forward(&e, &mut logits);

                let (loss, mut d_logits) = softmax_ce(&logits, label);
                epoch_loss += loss;
                // Average over the batch for stable step sizes.
                let inv = 1.0 / chunk.len() as f32;
                d_logits.iter_mut().for_each(|d| *d *= inv);

                let mut d_e = vec![0.0f32; enc.config.embedding_dim];
                head.backward(&e, &d_logits, Some(&mut d_e));
                let mut d_hidden = vec![0.0f32; enc.config.hidden];
                enc.l2.backward(&hidden, &d_e, Some(&mut d_hidden));
                for (dh, pt) in d_hidden.iter_mut().zip(&pre_tanh) {
                    let t = pt.tanh();
                    *dh *= 1.0 - t * t;
                }
                enc.l1.backward(z, &d_hidden, None);
            }
            let mut params = enc.params_mut();
            params.extend(head.params_mut());
            // L2 on weight matrices only.
            let wd = opts.weight_decay as f32;
            if wd > 0.0 {
                for p in params.iter_mut() {
                    if p.name().ends_with(".w") {
                        let n = p.len();
                        for i in 0..n {
                            let v = p.values()[i];
                            p.grad_mut()[i] += wd * v;
                        }
                    }
                }
            }
            opt.step(&mut params)?;
        }
        final_loss = epoch_loss / order.len() as f64;
    }

    let accuracy = |indices: &[usize]| -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let mut correct = 0usize;
        for &si in indices {
            let e = enc.project(&standardized[si]);
            let mut logits = vec![0.0f32; n_presets];
            head.forward(&e, &mut logits);
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == samples[si].preset_idx {
                correct += 1;
            }
        }
        correct as f64 / indices.len() as f64
    };

    let report = PretrainReport {
        heldout_accuracy: accuracy(&held_idx),
        train_accuracy: accuracy(&train_idx),
        final_loss,
        n_train: train_idx.len(),
        n_heldout: held_idx.len(),
        n_presets,
    };

    enc.freeze();
    Ok((enc, report))
}

/// Cross-entropy over softmax; returns (loss, dloss/dlogits).
fn softmax_ce(logits: &[f32], label: usize) -> (f64, Vec<f32>) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &e) in exps.iter().enumerate() {
        let p = e / sum;
        grad.push((p - if i == label { 1.0 } else { 0.0 }) as f32);
    }
    let loss = -(exps[label] / sum).ln();
    (loss, grad)
}
