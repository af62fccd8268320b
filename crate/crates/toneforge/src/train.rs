//! Training loop and zero-shot evaluation.
//!
//! Each step samples a tone preset and two distinct performances: the input
//! is a clean segment of one, the target its wet render, and the tone
//! embedding comes from the *other* performance rendered with the same
//! preset, so the embedding can only carry tone, never content. The encoder
//! stays frozen; the generator and the conditioning network train.

use std::path::Path;
use std::time::Instant;

use crate::cond::{
    fnv1a64, modulate_backward, BakedWeights, Conditioning, HyperLayerOut, ToneEmbedding,
};
use crate::corpus::{LoadedCorpus, Split};
use crate::error::{Error, Result};
use crate::gcn::{backward_train, forward_train, receptive_field, GcnGrads, GcnModel};
use crate::nn::adam::Adam;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::store::{save_model, ModelBundle};

const ESR_EPSILON: f64 = 1e-9;

/// Error-to-signal ratio: sum((t - p)^2) / (sum(t^2) + eps).
pub fn esr<S: Scalar>(target: &[S], pred: &[S]) -> Result<S> {
    if target.len() != pred.len() {
        return Err(Error::Contract(format!(
            "esr length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    let mut num = S::ZERO;
    let mut den = S::from_f64(ESR_EPSILON);
    for (&t, &p) in target.iter().zip(pred) {
        let d = t - p;
        num += d * d;
        den += t * t;
    }
    Ok(num / den)
}

/// y[t] = x[t] - alpha * x[t-1], with x[-1] = 0.
pub fn pre_emphasis<S: Scalar>(x: &[S], alpha: S) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    let mut prev = S::ZERO;
    for &v in x {
        out.push(v - alpha * prev);
        prev = v;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights<S: Scalar> {
    pub esr_weight: S,
    pub mae_weight: S,
    pub pre_emphasis: S,
}

impl<S: Scalar> LossWeights<S> {
    pub fn new(esr_weight: f64, mae_weight: f64, pre_emphasis: f64) -> Self {
        LossWeights {
            esr_weight: S::from_f64(esr_weight),
            mae_weight: S::from_f64(mae_weight),
            pre_emphasis: S::from_f64(pre_emphasis),
        }
    }
}

/// esr_weight * esr(pre_emphasis(target), pre_emphasis(pred))
/// + mae_weight * mean |target - pred|.
pub fn training_loss<S: Scalar>(target: &[S], pred: &[S], w: &LossWeights<S>) -> Result<S> {
    let u = pre_emphasis(target, w.pre_emphasis);
    let v = pre_emphasis(pred, w.pre_emphasis);
    let e = esr(&u, &v)?;
    let n = S::from_f64(target.len() as f64);
    let mut mae = S::ZERO;
    for (&t, &p) in target.iter().zip(pred) {
        mae += (t - p).abs();
    }
    mae /= n;
    Ok(w.esr_weight * e + w.mae_weight * mae)
}

/// Loss plus its gradient with respect to `pred`.
pub fn training_loss_grad<S: Scalar>(
    target: &[S],
    pred: &[S],
    w: &LossWeights<S>,
) -> Result<(S, Vec<S>)> {
    if target.len() != pred.len() {
        return Err(Error::Contract(format!(
            "loss length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    let n = target.len();
    let u = pre_emphasis(target, w.pre_emphasis);
    let v = pre_emphasis(pred, w.pre_emphasis);

    let mut den = S::from_f64(ESR_EPSILON);
    for &ui in &u {
        den += ui * ui;
    }
    let mut num = S::ZERO;
    let mut d_v = vec![S::ZERO; n];
    for i in 0..n {
        let d = u[i] - v[i];
        num += d * d;
        d_v[i] = -(S::from_f64(2.0)) * d / den;
    }
    let esr_val = num / den;

    let inv_n = S::ONE / S::from_f64(n as f64);
    let mut mae = S::ZERO;
    let mut grad = vec![S::ZERO; n];
    for i in 0..n {
        // Adjoint of the pre-emphasis filter.
        let mut g = d_v[i];
        if i + 1 < n {
            g -= w.pre_emphasis * d_v[i + 1];
        }
        grad[i] = w.esr_weight * g;

        let r = target[i] - pred[i];
        mae += r.abs();
        let sign = if r > S::ZERO {
            S::ONE
        } else if r < S::ZERO {
            -S::ONE
        } else {
            S::ZERO
        };
        grad[i] += w.mae_weight * (-sign) * inv_n;
    }
    mae *= inv_n;
    Ok((w.esr_weight * esr_val + w.mae_weight * mae, grad))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub segment_len: usize,
    pub lr: f64,
    pub esr_weight: f64,
    pub mae_weight: f64,
    pub pre_emphasis: f64,
    /// Reference crop length fed to the encoder, in seconds.
    pub reference_seconds: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 1,
            segment_len: 32_768,
            lr: 2e-3,
            esr_weight: 1.0,
            mae_weight: 0.5,
            pre_emphasis: 0.95,
            reference_seconds: 1.0,
            seed: 0,
            log_every: 200,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_curve: Vec<f32>,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub steps: usize,
    pub wall_s: f64,
}

struct TrainSet {
    presets: Vec<u32>,
    contents: Vec<u32>,
}

fn train_set(corpus: &LoadedCorpus) -> Result<TrainSet> {
    let presets = corpus.manifest.train_preset_ids();
    let contents: Vec<u32> = corpus
        .manifest
        .contents
        .iter()
        .filter(|c| !c.heldout)
        .map(|c| c.id)
        .collect();
    if presets.is_empty() {
        return Err(Error::Contract("corpus has no train presets".into()));
    }
    if contents.len() < 2 {
        return Err(Error::Contract(
            "zero-shot pairing needs >= 2 train performances".into(),
        ));
    }
    for &p in &presets {
        for &c in &contents {
            if !corpus.wet.contains_key(&(p, c)) {
                return Err(Error::Contract(format!(
                    "missing wet clip for train preset {p}, content {c}"
                )));
            }
        }
    }
    Ok(TrainSet { presets, contents })
}

/// Routes cached-weight-view gradients into the generator's own parameters
/// (used for the unconditioned and FiLM paths, and for the unconditioned
/// layers of the hypernet path).
pub(crate) fn add_base_grads<S: Scalar>(
    model: &mut GcnModel<S>,
    grads: &GcnGrads<S>,
    skip_cond_layers: bool,
) {
    let add = |dst: &mut [S], src: &[S]| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    };
    add(model.input_w.grad_mut(), &grads.input_w);
    add(model.input_b.grad_mut(), &grads.input_b);
    add(model.head_w.grad_mut(), &grads.head_w);
    add(model.head_b.grad_mut(), &grads.head_b);
    if skip_cond_layers {
        return;
    }
    for (b, bg) in model.blocks.iter_mut().zip(&grads.blocks) {
        add(b.dilated_w.grad_mut(), &bg.dilated_w);
        add(b.dilated_b.grad_mut(), &bg.dilated_b);
        add(b.residual_w.grad_mut(), &bg.residual_w);
        add(b.residual_b.grad_mut(), &bg.residual_b);
        add(b.skip_w.grad_mut(), &bg.skip_w);
        add(b.skip_b.grad_mut(), &bg.skip_b);
    }
}

/// Hypernet path: split the gradient on each modulated layer into the base
/// weight gradient and the delta gradient, then push delta gradients through
/// the hyper layers.
pub(crate) fn route_hyper_grads<S: Scalar>(
    model: &mut GcnModel<S>,
    grads: &GcnGrads<S>,
    outs: &[HyperLayerOut<S>],
) -> Vec<(Vec<S>, Vec<S>)> {
    let descs = model.enumerate_cond_layers();
    let mut delta_grads = Vec::with_capacity(descs.len());
    for (idx, desc) in descs.iter().enumerate() {
        let bg = &grads.blocks[idx / 3];
        let (d_wp, d_bp): (&[S], &[S]) = match idx % 3 {
            0 => (&bg.dilated_w, &bg.dilated_b),
            1 => (&bg.residual_w, &bg.residual_b),
            _ => (&bg.skip_w, &bg.skip_b),
        };
        let mut d_dw = vec![S::ZERO; outs[idx].dw.len()];
        let mut d_db = vec![S::ZERO; outs[idx].db.len()];
        let block = &mut model.blocks[idx / 3];
        let (w_t, b_t) = match idx % 3 {
            0 => (&mut block.dilated_w, &mut block.dilated_b),
            1 => (&mut block.residual_w, &mut block.residual_b),
            _ => (&mut block.skip_w, &mut block.skip_b),
        };
        let (w_vals, w_grad) = w_t.values_and_grad_mut();
        let (b_vals, b_grad) = b_t.values_and_grad_mut();
        modulate_backward(
            w_vals,
            b_vals,
            &outs[idx].dw,
            &outs[idx].db,
            desc.w_shape,
            d_wp,
            d_bp,
            w_grad,
            b_grad,
            &mut d_dw,
            &mut d_db,
        );
        delta_grads.push((d_dw, d_db));
    }
    delta_grads
}

/// Train the generator and conditioning nets on the corpus' train split.
pub fn train(
    corpus: &LoadedCorpus,
    bundle: &mut ModelBundle,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    if !bundle.encoder.is_frozen() {
        return Err(Error::Contract(
            "encoder must be pretrained and frozen before generator training".into(),
        ));
    }
    let rf = receptive_field(&bundle.gcn.config);
    if cfg.segment_len <= rf {
        return Err(Error::Contract(format!(
            "segment_len {} must exceed receptive field {rf}",
            cfg.segment_len
        )));
    }
    corpus.manifest.validate()?;
    let set = train_set(corpus)?;
    let ref_len = (cfg.reference_seconds * corpus.manifest.sample_rate as f64) as usize;
    for (&p, &c) in set.presets.iter().zip(set.contents.iter().cycle()) {
        let clip = corpus.wet_clip(p, c)?;
        if clip.len() < cfg.segment_len || clip.len() < ref_len {
            return Err(Error::Contract(format!(
                "clip (preset {p}, content {c}) shorter than segment/reference length"
            )));
        }
    }

    let weights = LossWeights::<f32>::new(cfg.esr_weight, cfg.mae_weight, cfg.pre_emphasis);
    let mut sample_rng = Rng::new(cfg.seed).derive(1);
    let mut opt: Adam<f32> = Adam::new(cfg.lr);
    let mut grads = GcnGrads::<f32>::zeros(
        &bundle.gcn.config,
        matches!(bundle.cond, Conditioning::Film(_)),
    );
    let mut baked: Option<BakedWeights<f32>> = match bundle.cond {
        Conditioning::Hyper(_) => Some(BakedWeights::from_base(&bundle.gcn, 0)),
        _ => None,
    };

    let start = Instant::now();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut step_loss = 0.0f32;
        for _ in 0..cfg.batch_size {
            // Sample (preset, content pair, crop positions).
            let preset = set.presets[sample_rng.below(set.presets.len())];
            let c1 = set.contents[sample_rng.below(set.contents.len())];
            let c2 = loop {
                let c = set.contents[sample_rng.below(set.contents.len())];
                if c != c1 {
                    break c;
                }
            };
            let clean = &corpus.clean[c1 as usize];
            let wet = corpus.wet_clip(preset, c1)?;
            let t0 = sample_rng.below(clean.len() - cfg.segment_len + 1);
            let input = &clean.samples()[t0..t0 + cfg.segment_len];
            let target = &wet.samples()[t0..t0 + cfg.segment_len];

            let reference = corpus.wet_clip(preset, c2)?;
            let r0 = sample_rng.below(reference.len() - ref_len + 1);
            let ref_crop = reference.crop(r0, ref_len)?;
            let phi = crate::encoder::encode(&ref_crop, &bundle.encoder)?;

            // Forward with the mode-specific weight view.
            let (cache, hyper_outs, film_params) = match &bundle.cond {
                Conditioning::None => (
                    forward_train(&bundle.gcn, &bundle.gcn.config, None, input)?,
                    None,
                    None,
                ),
                Conditioning::Film(fg) => {
                    let params = fg.params_for(phi.vector())?;
                    let cache =
                        forward_train(&bundle.gcn, &bundle.gcn.config, Some(&params), input)?;
                    (cache, None, Some(params))
                }
                Conditioning::Hyper(h) => {
                    let outs = h.forward_all(phi.vector())?;
                    let bk = baked.as_mut().expect("baked scratch for hypernet");
                    bk.apply_deltas(&bundle.gcn, &outs)?;
                    let cache = forward_train(bk, &bundle.gcn.config, None, input)?;
                    (cache, Some(outs), None)
                }
            };

            // Loss on the warm-up-excluded tail.
            let (loss, tail_grad) =
                training_loss_grad(&target[rf..], &cache.output[rf..], &weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} (preset {preset}, contents {c1}/{c2})"
                )));
            }
            step_loss += loss;
            let scale = 1.0 / cfg.batch_size as f32;
            let mut d_pred = vec![0.0f32; cfg.segment_len];
            for (d, g) in d_pred[rf..].iter_mut().zip(&tail_grad) {
                *d = g * scale;
            }

            // Backward through the same weight view, then route.
            zero_grads(&mut grads);
            match &mut bundle.cond {
                Conditioning::None => {
                    backward_train(
                        &bundle.gcn,
                        &bundle.gcn.config,
                        None,
                        &cache,
                        &d_pred,
                        &mut grads,
                    );
                    add_base_grads(&mut bundle.gcn, &grads, false);
                }
                Conditioning::Film(fg) => {
                    let params = film_params.as_ref().unwrap();
                    backward_train(
                        &bundle.gcn,
                        &bundle.gcn.config,
                        Some(params),
                        &cache,
                        &d_pred,
                        &mut grads,
                    );
                    add_base_grads(&mut bundle.gcn, &grads, false);
                    fg.backward(phi.vector(), grads.film.as_ref().unwrap());
                }
                Conditioning::Hyper(h) => {
                    let bk = baked.as_ref().unwrap();
                    backward_train(bk, &bundle.gcn.config, None, &cache, &d_pred, &mut grads);
                    add_base_grads(&mut bundle.gcn, &grads, true);
                    let outs = hyper_outs.as_ref().unwrap();
                    let delta_grads = route_hyper_grads(&mut bundle.gcn, &grads, outs);
                    h.backward_all(phi.vector(), outs, &delta_grads);
                }
            }
        }

        let mut params = bundle.gcn.params_mut();
        params.extend(bundle.cond.params_mut());
        opt.step(&mut params)?;

        let mean_loss = step_loss / cfg.batch_size as f32;
        loss_curve.push(mean_loss);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("step {step:>6}  loss {mean_loss:.6}");
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_model(&dir.join(format!("checkpoint_{:06}.tfm", step + 1)), bundle)?;
            }
        }
    }

    let initial = *loss_curve.first().unwrap_or(&0.0);
    let tail = &loss_curve[loss_curve.len().saturating_sub(50)..];
    let final_loss = tail.iter().sum::<f32>() / tail.len().max(1) as f32;
    Ok(TrainReport {
        initial_loss: initial,
        final_loss,
        steps: cfg.steps,
        wall_s: start.elapsed().as_secs_f64(),
        loss_curve,
    })
}

fn zero_grads(grads: &mut GcnGrads<f32>) {
    let z = |v: &mut Vec<f32>| v.iter_mut().for_each(|x| *x = 0.0);
    z(&mut grads.input_w);
    z(&mut grads.input_b);
    z(&mut grads.head_w);
    z(&mut grads.head_b);
    for b in grads.blocks.iter_mut() {
        z(&mut b.dilated_w);
        z(&mut b.dilated_b);
        z(&mut b.residual_w);
        z(&mut b.residual_b);
        z(&mut b.skip_w);
        z(&mut b.skip_b);
    }
    if let Some(f) = grads.film.as_mut() {
        for (g, bt) in f.iter_mut() {
            z(g);
            z(bt);
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder pretraining on a corpus
// ---------------------------------------------------------------------------

/// Pooled log-mel features for every train-preset clip. Train-split clips
/// fit the classifier; held-out-content clips of the same presets measure
/// generalization.
pub fn corpus_encoder_samples(
    corpus: &LoadedCorpus,
    mel: &crate::mel::MelConfig,
) -> Result<(Vec<crate::encoder::EncoderSample>, usize)> {
    let train_presets = corpus.manifest.train_preset_ids();
    if train_presets.len() < 2 {
        return Err(Error::Contract(
            "encoder pretraining needs >= 2 train presets".into(),
        ));
    }
    let label_of = |id: u32| train_presets.iter().position(|&p| p == id);
    let mut samples = Vec::new();
    for entry in &corpus.manifest.entries {
        let heldout = match entry.split {
            Split::Train => false,
            Split::HeldoutContent => true,
            Split::HeldoutTone => continue,
        };
        let label = match label_of(entry.preset_id) {
            Some(l) => l,
            None => continue,
        };
        let clip = corpus.wet_clip(entry.preset_id, entry.content_id)?;
        samples.push(crate::encoder::EncoderSample {
            preset_idx: label,
            features: crate::mel::log_mel_stats(clip, mel)?,
            heldout,
        });
    }
    Ok((samples, train_presets.len()))
}

/// Pretrain the tone encoder on the corpus' train presets and freeze it.
pub fn pretrain_encoder_on_corpus(
    corpus: &LoadedCorpus,
    config: crate::encoder::EncoderConfig,
    opts: &crate::encoder::PretrainOptions,
) -> Result<(
    crate::encoder::EncoderWeights,
    crate::encoder::PretrainReport,
)> {
    let (samples, n_presets) = corpus_encoder_samples(corpus, &config.mel)?;
    crate::encoder::pretrain_encoder(&samples, n_presets, config, opts)
}

// ---------------------------------------------------------------------------
// Zero-shot evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PresetMetrics {
    pub preset_id: u32,
    pub esr: f64,
    pub mae: f64,
    pub identity_esr: f64,
    pub mean_embedding_esr: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub model: String,
    pub rows: Vec<PresetMetrics>,
    pub aggregate_esr: f64,
    pub aggregate_mae: f64,
    pub aggregate_identity_esr: f64,
    pub aggregate_mean_embedding_esr: f64,
    pub beats_identity: usize,
    pub config_hash: u64,
    pub wall_s: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        out.push_str("toneforge-eval v1\n");
        let _ = writeln!(out, "model {}", self.model);
        let _ = writeln!(out, "config_hash {:016x}", self.config_hash);
        let _ = writeln!(
            out,
            "aggregate esr {} mae {} identity_esr {} mean_embedding_esr {}",
            self.aggregate_esr,
            self.aggregate_mae,
            self.aggregate_identity_esr,
            self.aggregate_mean_embedding_esr
        );
        let _ = writeln!(
            out,
            "beats_identity {}/{}",
            self.beats_identity,
            self.rows.len()
        );
        let _ = writeln!(out, "wall_s {}", self.wall_s);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "preset {} esr {} mae {} identity_esr {} mean_embedding_esr {}",
                r.preset_id, r.esr, r.mae, r.identity_esr, r.mean_embedding_esr
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8} {:>12} {:>12} {:>14} {:>16}",
            "preset", "esr", "mae", "identity_esr", "mean_emb_esr"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8} {:>12.6} {:>12.6} {:>14.6} {:>16.6}",
                r.preset_id, r.esr, r.mae, r.identity_esr, r.mean_embedding_esr
            );
        }
        let _ = writeln!(
            out,
            "{:>8} {:>12.6} {:>12.6} {:>14.6} {:>16.6}  (mean; beats identity on {}/{})",
            "all",
            self.aggregate_esr,
            self.aggregate_mae,
            self.aggregate_identity_esr,
            self.aggregate_mean_embedding_esr,
            self.beats_identity,
            self.rows.len()
        );
        out
    }
}

/// Evaluate zero-shot tone transfer on the held-out presets: condition on a
/// reference clip of unseen content, render unseen clean content, and compare
/// against the ground-truth wet render plus two baselines (identity
/// passthrough, mean training embedding).
pub fn zero_shot_eval(bundle: &ModelBundle, corpus: &LoadedCorpus) -> Result<MetricsReport> {
    let start = Instant::now();
    let held_presets = corpus.manifest.heldout_preset_ids();
    if held_presets.is_empty() {
        return Err(Error::Contract("corpus has no held-out presets".into()));
    }
    let held_contents: Vec<u32> = corpus
        .manifest
        .contents
        .iter()
        .filter(|c| c.heldout)
        .map(|c| c.id)
        .collect();
    if held_contents.len() < 2 {
        return Err(Error::Contract(
            "zero-shot eval needs >= 2 held-out performances (reference vs target)".into(),
        ));
    }
    let ref_content = held_contents[0];
    let eval_contents = &held_contents[1..];

    // Mean training embedding baseline.
    let train_presets = corpus.manifest.train_preset_ids();
    let train_contents: Vec<u32> = corpus
        .manifest
        .contents
        .iter()
        .filter(|c| !c.heldout)
        .map(|c| c.id)
        .collect();
    let anchor = *train_contents
        .first()
        .ok_or_else(|| Error::Contract("corpus has no train performances".into()))?;
    let mut mean_vec = vec![0.0f64; bundle.embedding_dim()];
    for &p in &train_presets {
        let phi = bundle.encode_reference(corpus.wet_clip(p, anchor)?)?;
        for (m, v) in mean_vec.iter_mut().zip(phi.vector()) {
            *m += *v as f64;
        }
    }
    let mean_phi = ToneEmbedding::new(
        mean_vec
            .iter()
            .map(|v| (*v / train_presets.len() as f64) as f32)
            .collect(),
        Some("mean-training-embedding".into()),
    )?;

    let mut rows = Vec::with_capacity(held_presets.len());
    for &p in &held_presets {
        let phi = bundle.encode_reference(corpus.wet_clip(p, ref_content)?)?;
        let (mut e_sum, mut m_sum, mut id_sum, mut me_sum) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for &c in eval_contents {
            let clean = &corpus.clean[c as usize];
            let wet = corpus.wet_clip(p, c)?;
            let pred = bundle.forward_offline(clean.samples(), Some(&phi))?;
            e_sum += esr(wet.samples(), &pred)?.to_f64();
            let n = wet.len() as f64;
            m_sum += wet
                .samples()
                .iter()
                .zip(&pred)
                .map(|(t, y)| (t - y).abs() as f64)
                .sum::<f64>()
                / n;
            id_sum += esr(wet.samples(), clean.samples())?.to_f64();
            let pred_mean = bundle.forward_offline(clean.samples(), Some(&mean_phi))?;
            me_sum += esr(wet.samples(), &pred_mean)?.to_f64();
        }
        let k = eval_contents.len() as f64;
        rows.push(PresetMetrics {
            preset_id: p,
            esr: e_sum / k,
            mae: m_sum / k,
            identity_esr: id_sum / k,
            mean_embedding_esr: me_sum / k,
        });
    }

    let n = rows.len() as f64;
    let beats_identity = rows.iter().filter(|r| r.esr < r.identity_esr).count();
    let digest = bundle.config_digest();
    let config_hash = fnv1a64(
        format!("{digest}|seed={}", corpus.manifest.seed)
            .bytes()
            .collect::<Vec<u8>>(),
    );
    Ok(MetricsReport {
        model: digest,
        aggregate_esr: rows.iter().map(|r| r.esr).sum::<f64>() / n,
        aggregate_mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        aggregate_identity_esr: rows.iter().map(|r| r.identity_esr).sum::<f64>() / n,
        aggregate_mean_embedding_esr: rows.iter().map(|r| r.mean_embedding_esr).sum::<f64>() / n,
        beats_identity,
        config_hash,
        wall_s: start.elapsed().as_secs_f64(),
        rows,
    })
}
