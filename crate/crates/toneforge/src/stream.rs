//! Real-time inference: block-based streaming with per-layer history rings
//! and baked weights.
//!
//! Two contexts cooperate. The control context bakes weights (`prepare_tone`)
//! and stages them (`set_tone`); the audio context calls `process_block`,
//! which installs any staged tone at the block boundary and then runs the
//! shared generator kernel. The audio path neither allocates nor frees:
//! retired weight sets are parked for the control context to drop.

use std::time::Instant;

use crate::audio::AudioBuffer;
use crate::cond::{bake, BakedWeights, Conditioning, ToneEmbedding};
use crate::error::{Error, Result};
use crate::gcn::{process_block_with_state, receptive_field, FilmParams, GcnConfig, GcnState};
use crate::rng::Rng;
use crate::store::ModelBundle;

/// A fully prepared tone, safe to hand to the audio context.
#[derive(Debug, Clone)]
pub struct StagedTone {
    pub weights: BakedWeights<f32>,
    pub film: Option<FilmParams<f32>>,
}

/// Bake a tone for streaming, dispatching on the bundle's conditioning mode.
pub fn prepare_tone(bundle: &ModelBundle, phi: Option<&ToneEmbedding>) -> Result<StagedTone> {
    match (&bundle.cond, phi) {
        (Conditioning::None, _) => Ok(StagedTone {
            weights: BakedWeights::from_base(&bundle.gcn, 0),
            film: None,
        }),
        (Conditioning::Film(fg), Some(p)) => Ok(StagedTone {
            weights: BakedWeights::from_base(&bundle.gcn, p.fingerprint()),
            film: Some(fg.params_for(p.vector())?),
        }),
        (Conditioning::Hyper(h), Some(p)) => Ok(StagedTone {
            weights: bake(&bundle.gcn, h, p)?,
            film: None,
        }),
        (_, None) => Err(Error::Contract(
            "conditioned model requires a tone embedding".into(),
        )),
    }
}

/// Lock-free single-producer/single-consumer tone exchange. The control side
/// stages boxed tones; the audio side swaps them in at block boundaries and
/// returns the displaced box through the trash slot so every allocation is
/// freed by the control context.
///
/// Pointer protocol: both slots hold either null or a `Box<StagedTone>` leaked
/// with `Box::into_raw`. A pointer lives in at most one slot, is taken with a
/// single atomic swap, and is freed exactly once (by `send`, `drain_trash`,
/// or `Drop`). `send` drains trash before staging, so at most one retired box
/// is ever in flight and the audio side always finds the trash slot empty.
#[derive(Debug)]
struct ToneMailbox {
    pending: std::sync::atomic::AtomicPtr<StagedTone>,
    trash: std::sync::atomic::AtomicPtr<StagedTone>,
}

impl ToneMailbox {
    fn new() -> Self {
        ToneMailbox {
            pending: std::sync::atomic::AtomicPtr::new(std::ptr::null_mut()),
            trash: std::sync::atomic::AtomicPtr::new(std::ptr::null_mut()),
        }
    }

    fn drain_trash(&self) {
        let old = self
            .trash
            .swap(std::ptr::null_mut(), std::sync::atomic::Ordering::AcqRel);
        if !old.is_null() {
            drop(unsafe { Box::from_raw(old) });
        }
    }

    fn stage(&self, staged: StagedTone) {
        self.drain_trash();
        let new = Box::into_raw(Box::new(staged));
        let displaced = self.pending.swap(new, std::sync::atomic::Ordering::AcqRel);
        if !displaced.is_null() {
            // Last writer wins; the loser is freed here, in the control context.
            drop(unsafe { Box::from_raw(displaced) });
        }
    }
}

impl Drop for ToneMailbox {
    fn drop(&mut self) {
        for slot in [&self.pending, &self.trash] {
            let p = slot.swap(std::ptr::null_mut(), std::sync::atomic::Ordering::AcqRel);
            if !p.is_null() {
                drop(unsafe { Box::from_raw(p) });
            }
        }
    }
}

/// Control-context handle for staging tones while the audio context keeps
/// calling [`StreamProcessor::process_block`].
#[derive(Debug, Clone)]
pub struct ToneSender {
    mailbox: std::sync::Arc<ToneMailbox>,
    config: GcnConfig,
}

impl ToneSender {
    /// Stage a tone; it takes effect at the processor's next block boundary.
    /// At most one staged tone is retained (last writer wins).
    pub fn send(&self, staged: StagedTone) -> Result<()> {
        check_tone(&self.config, &staged)?;
        self.mailbox.stage(staged);
        Ok(())
    }
}

#[derive(Debug)]
pub struct StreamProcessor {
    config: GcnConfig,
    tone: StagedTone,
    state: GcnState<f32>,
    block_size: usize,
    mailbox: std::sync::Arc<ToneMailbox>,
}

impl Clone for StreamProcessor {
    /// Clones weights and history into an independent processor with its own
    /// (empty) staging mailbox.
    fn clone(&self) -> Self {
        StreamProcessor {
            config: self.config.clone(),
            tone: self.tone.clone(),
            state: self.state.clone(),
            block_size: self.block_size,
            mailbox: std::sync::Arc::new(ToneMailbox::new()),
        }
    }
}

impl StreamProcessor {
    /// Bake from an embedding (or pass a precomputed tone via
    /// [`StreamProcessor::from_staged`]). Rings start zeroed, matching the
    /// offline zero left-padding.
    pub fn new(
        bundle: &ModelBundle,
        phi: Option<&ToneEmbedding>,
        block_size: usize,
    ) -> Result<StreamProcessor> {
        let staged = prepare_tone(bundle, phi)?;
        Self::from_staged(bundle.gcn.config.clone(), staged, block_size)
    }

    pub fn from_staged(
        config: GcnConfig,
        staged: StagedTone,
        block_size: usize,
    ) -> Result<StreamProcessor> {
        if block_size == 0 {
            return Err(Error::Contract("block_size must be >= 1".into()));
        }
        config.validate()?;
        check_tone(&config, &staged)?;
        let state = GcnState::new(&config, block_size);
        Ok(StreamProcessor {
            tone: staged,
            state,
            block_size,
            mailbox: std::sync::Arc::new(ToneMailbox::new()),
            config,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Per-block history capacities, in samples: (kernel - 1) * dilation.
    pub fn ring_capacities(&self) -> &[usize] {
        self.state.ring_capacities()
    }

    pub fn tone_fingerprint(&self) -> u64 {
        self.tone.weights.fingerprint
    }

    /// Handle for staging tones from a control thread while audio runs.
    pub fn tone_sender(&self) -> ToneSender {
        ToneSender {
            mailbox: self.mailbox.clone(),
            config: self.config.clone(),
        }
    }

    /// Stage a new tone from the same context; equivalent to sending through
    /// [`StreamProcessor::tone_sender`].
    pub fn set_tone(&mut self, staged: StagedTone) -> Result<()> {
        check_tone(&self.config, &staged)?;
        self.mailbox.stage(staged);
        Ok(())
    }

    /// Process one block. `input.len()` must not exceed the configured block
    /// size (the final block of a stream may be shorter). Applies a staged
    /// tone at the boundary before processing. Performs no allocation and
    /// acquires no locks; displaced weight sets are handed back to the
    /// control context for freeing.
    pub fn process_block(&mut self, input: &[f32], output: &mut [f32]) -> Result<()> {
        if input.len() > self.block_size {
            return Err(Error::Contract(format!(
                "input block {} exceeds configured block size {}",
                input.len(),
                self.block_size
            )));
        }
        if output.len() != input.len() {
            return Err(Error::Contract(format!(
                "output length {} != input length {}",
                output.len(),
                input.len()
            )));
        }
        let staged = self
            .mailbox
            .pending
            .swap(std::ptr::null_mut(), std::sync::atomic::Ordering::AcqRel);
        if !staged.is_null() {
            // Swap contents with the box, then park the box (now holding the
            // old tone) in the trash slot. No allocation or free happens here.
            unsafe { std::mem::swap(&mut self.tone, &mut *staged) };
            let prev = self
                .mailbox
                .trash
                .swap(staged, std::sync::atomic::Ordering::AcqRel);
            // The protocol guarantees the trash slot was empty (send drains
            // it before staging); a non-null value here would mean a protocol
            // break, and leaking it is preferable to freeing on this thread.
            debug_assert!(prev.is_null());
        }
        process_block_with_state(
            &self.tone.weights,
            &self.config,
            self.tone.film.as_ref(),
            &mut self.state,
            input,
            output,
        );
        if output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(self.diagnose_non_finite()));
        }
        Ok(())
    }

    /// Cold path: locate the first block whose history went non-finite.
    fn diagnose_non_finite(&self) -> String {
        for (bi, cap) in self.state.ring_capacities().iter().enumerate() {
            let _ = cap;
            if self.state.history(bi).iter().any(|v| !v.is_finite()) {
                return format!("non-finite streaming output; first bad layer: block {bi}");
            }
        }
        "non-finite streaming output at the output head".to_string()
    }
}

fn check_tone(config: &GcnConfig, staged: &StagedTone) -> Result<()> {
    let w = &staged.weights;
    if w.config.num_blocks != config.num_blocks
        || w.config.channels != config.channels
        || w.config.kernel_size != config.kernel_size
        || w.config.skip_channels != config.skip_channels
        || w.config.dilations != config.dilations
    {
        return Err(Error::Contract(
            "staged tone shape does not match the processor's model".into(),
        ));
    }
    if let Some(fp) = &staged.film {
        if fp.per_block.len() != config.num_blocks
            || fp
                .per_block
                .iter()
                .any(|(g, b)| g.len() != config.channels || b.len() != config.channels)
        {
            return Err(Error::Contract("staged film parameters malformed".into()));
        }
    }
    Ok(())
}

/// Real-time factor measurement.
#[derive(Debug, Clone)]
pub struct RtfReport {
    pub model: String,
    pub block_size: usize,
    pub sample_rate: u32,
    pub samples_processed: usize,
    pub wall_s: f64,
    /// wall time / audio duration; < 1 is faster than real time.
    pub rtf: f64,
    pub worst_block_s: f64,
    pub receptive_field: usize,
}

impl RtfReport {
    pub fn to_text(&self) -> String {
        format!(
            "toneforge-bench v1\nmodel {}\nblock_size {}\nsample_rate {}\nsamples {}\nwall_s {}\nrtf {}\nworst_block_s {}\nreceptive_field {}\n",
            self.model,
            self.block_size,
            self.sample_rate,
            self.samples_processed,
            self.wall_s,
            self.rtf,
            self.worst_block_s,
            self.receptive_field
        )
    }
}

/// Stream seeded noise through the processor and measure wall time, with a
/// short warm-up excluded.
pub fn bench_rtf(
    bundle: &ModelBundle,
    phi: Option<&ToneEmbedding>,
    duration_s: f64,
    block_size: usize,
) -> Result<RtfReport> {
    if duration_s < 1.0 {
        return Err(Error::Contract("bench duration must be >= 1 s".into()));
    }
    let sample_rate = bundle.sample_rate;
    let mut proc = StreamProcessor::new(bundle, phi, block_size)?;
    let total_blocks = ((duration_s * sample_rate as f64) as usize).div_ceil(block_size);
    let warmup_blocks = 32.min(total_blocks / 10 + 1);

    let mut rng = Rng::new(0xBE7C);
    let input: Vec<f32> = (0..block_size)
        .map(|_| (rng.normal() * 0.25) as f32)
        .collect();
    let mut output = vec![0.0f32; block_size];

    for _ in 0..warmup_blocks {
        proc.process_block(&input, &mut output)?;
    }

    let mut worst = 0.0f64;
    let start = Instant::now();
    for _ in 0..total_blocks {
        let t0 = Instant::now();
        proc.process_block(&input, &mut output)?;
        let dt = t0.elapsed().as_secs_f64();
        if dt > worst {
            worst = dt;
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let samples = total_blocks * block_size;
    let audio_s = samples as f64 / sample_rate as f64;
    Ok(RtfReport {
        model: bundle.config_digest(),
        block_size,
        sample_rate,
        samples_processed: samples,
        wall_s: wall,
        rtf: wall / audio_s,
        worst_block_s: worst,
        receptive_field: receptive_field(&bundle.gcn.config),
    })
}

/// Stream a whole buffer through a fresh processor (the `render --streaming`
/// path). Equivalent to the offline forward.
pub fn stream_render(
    bundle: &ModelBundle,
    phi: Option<&ToneEmbedding>,
    x: &AudioBuffer,
    block_size: usize,
) -> Result<AudioBuffer> {
    let mut proc = StreamProcessor::new(bundle, phi, block_size)?;
    let mut out = vec![0.0f32; x.len()];
    for (i, chunk) in x.samples().chunks(block_size).enumerate() {
        let start = i * block_size;
        proc.process_block(chunk, &mut out[start..start + chunk.len()])?;
    }
    AudioBuffer::new(out, x.sample_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::{Granularity, HyperNetwork};
    use crate::encoder::{EncoderConfig, EncoderWeights};
    use crate::gcn::{dilation_pattern, gcn_forward_weights, CondMode};

    fn test_bundle(cond: CondMode, seed: u64) -> ModelBundle {
        let cfg = GcnConfig {
            num_blocks: 4,
            channels: 6,
            kernel_size: 3,
            skip_channels: 5,
            dilations: dilation_pattern(4, 4),
            cond_mode: cond,
        };
        let enc_cfg = EncoderConfig {
            hidden: 16,
            embedding_dim: 12,
            ..Default::default()
        };
        let encoder = EncoderWeights::init(enc_cfg, &mut Rng::new(seed + 1));
        let mut bundle = ModelBundle::init(cfg, Granularity::PerChannel, 8, encoder, seed).unwrap();
        if let Conditioning::Hyper(h) = &mut bundle.cond {
            let mut r = Rng::new(seed + 2);
            for layer in h.layers.iter_mut() {
                for v in layer.l2.w.values_mut() {
                    *v = (r.normal() * 0.15) as f32;
                }
            }
        }
        bundle
    }

    fn random_phi(d: usize, seed: u64) -> ToneEmbedding {
        let mut rng = Rng::new(seed);
        ToneEmbedding::new((0..d).map(|_| rng.normal() as f32).collect(), None).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| (rng.normal() * 0.3) as f32).collect()
    }

    #[test]
    fn fresh_processor_silence_in_silence_out() {
        let bundle = test_bundle(CondMode::None, 3);
        let mut proc = StreamProcessor::new(&bundle, None, 64).unwrap();
        let input = vec![0.0f32; 64];
        let mut out = vec![9.9f32; 64];
        proc.process_block(&input, &mut out).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ring_capacities_match_formula() {
        let bundle = test_bundle(CondMode::None, 4);
        let proc = StreamProcessor::new(&bundle, None, 32).unwrap();
        let expected: Vec<usize> = bundle
            .gcn
            .config
            .dilations
            .iter()
            .map(|d| (bundle.gcn.config.kernel_size - 1) * d)
            .collect();
        assert_eq!(proc.ring_capacities(), expected.as_slice());
    }

    #[test]
    fn init_with_phi_equals_init_with_precomputed_bake() {
        let bundle = test_bundle(CondMode::Hypernet, 5);
        let phi = random_phi(12, 9);
        let mut a = StreamProcessor::new(&bundle, Some(&phi), 128).unwrap();
        let staged = prepare_tone(&bundle, Some(&phi)).unwrap();
        let mut b = StreamProcessor::from_staged(bundle.gcn.config.clone(), staged, 128).unwrap();
        let x = noise(512, 2);
        let mut ya = vec![0.0f32; 512];
        let mut yb = vec![0.0f32; 512];
        for i in 0..4 {
            a.process_block(&x[i * 128..(i + 1) * 128], &mut ya[i * 128..(i + 1) * 128])
                .unwrap();
            b.process_block(&x[i * 128..(i + 1) * 128], &mut yb[i * 128..(i + 1) * 128])
                .unwrap();
        }
        assert!(ya.iter().zip(&yb).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn streaming_equals_offline_for_various_block_sizes() {
        let bundle = test_bundle(CondMode::Hypernet, 6);
        let phi = random_phi(12, 3);
        let x = noise(3000, 7);
        let staged = prepare_tone(&bundle, Some(&phi)).unwrap();
        let offline = gcn_forward_weights(&staged.weights, &bundle.gcn.config, None, &x).unwrap();
        for block in [16usize, 64, 128, 441] {
            let buf = AudioBuffer::new(x.clone(), 44_100).unwrap();
            let streamed = stream_render(&bundle, Some(&phi), &buf, block).unwrap();
            let max = offline
                .iter()
                .zip(streamed.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-5, "block {block}: max abs diff {max}");
        }
    }

    #[test]
    fn streaming_equals_offline_for_random_partitions() {
        let bundle = test_bundle(CondMode::None, 8);
        let x = noise(2500, 11);
        let offline = gcn_forward_weights(&bundle.gcn, &bundle.gcn.config, None, &x).unwrap();
        let mut rng = Rng::new(21);
        for trial in 0..5 {
            let mut proc = StreamProcessor::new(&bundle, None, 512).unwrap();
            let mut out = vec![0.0f32; x.len()];
            let mut pos = 0;
            while pos < x.len() {
                let len = 1 + rng.below(512.min(x.len() - pos));
                proc.process_block(&x[pos..pos + len], &mut out[pos..pos + len])
                    .unwrap();
                pos += len;
            }
            let max = offline
                .iter()
                .zip(&out)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-5, "trial {trial}: max abs diff {max}");
        }
    }

    #[test]
    fn impulse_split_across_boundary_matches_unsplit() {
        let bundle = test_bundle(CondMode::None, 12);
        let rf = receptive_field(&bundle.gcn.config);
        let n = rf + 64;
        let mut x = vec![0.0f32; n];
        x[60] = 1.0; // lands near a 64-sample block boundary
        let offline = gcn_forward_weights(&bundle.gcn, &bundle.gcn.config, None, &x).unwrap();
        let buf = AudioBuffer::new(x, 44_100).unwrap();
        let streamed = stream_render(&bundle, None, &buf, 64).unwrap();
        let max = offline
            .iter()
            .zip(streamed.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-5, "max {max}");
    }

    #[test]
    fn silence_tail_decays_like_offline() {
        let bundle = test_bundle(CondMode::None, 13);
        let mut x = noise(600, 5);
        for v in x[300..].iter_mut() {
            *v = 0.0;
        }
        let offline = gcn_forward_weights(&bundle.gcn, &bundle.gcn.config, None, &x).unwrap();
        let buf = AudioBuffer::new(x, 44_100).unwrap();
        let streamed = stream_render(&bundle, None, &buf, 100).unwrap();
        for i in 300..600 {
            assert!((offline[i] - streamed.samples()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn set_tone_swaps_exactly_at_block_boundary() {
        let bundle = test_bundle(CondMode::Hypernet, 14);
        let phi_a = random_phi(12, 100);
        let phi_b = random_phi(12, 200);
        let x = noise(1024, 3);
        let block = 128;

        // System under test: swap staged after block 3.
        let mut proc = StreamProcessor::new(&bundle, Some(&phi_a), block).unwrap();
        let tone_b = prepare_tone(&bundle, Some(&phi_b)).unwrap();
        let mut out = vec![0.0f32; x.len()];
        for i in 0..8 {
            if i == 4 {
                proc.set_tone(tone_b.clone()).unwrap();
            }
            proc.process_block(
                &x[i * block..(i + 1) * block],
                &mut out[i * block..(i + 1) * block],
            )
            .unwrap();
        }

        // Old-weights oracle for the prefix.
        let staged_a = prepare_tone(&bundle, Some(&phi_a)).unwrap();
        let offline_a =
            gcn_forward_weights(&staged_a.weights, &bundle.gcn.config, None, &x).unwrap();
        for i in 0..4 * block {
            assert_eq!(
                out[i].to_bits(),
                offline_a[i].to_bits(),
                "prefix mismatch at {i}"
            );
        }

        // New-weights oracle with rings carried over: a second processor
        // that replays the prefix under A, then swaps to B the same way.
        let mut oracle = StreamProcessor::new(&bundle, Some(&phi_a), block).unwrap();
        let mut scratch = vec![0.0f32; 4 * block];
        for i in 0..4 {
            oracle
                .process_block(
                    &x[i * block..(i + 1) * block],
                    &mut scratch[i * block..(i + 1) * block],
                )
                .unwrap();
        }
        let mut oracle = {
            let mut o = oracle.clone();
            o.set_tone(tone_b.clone()).unwrap();
            o
        };
        let mut expect = vec![0.0f32; 4 * block];
        for i in 0..4 {
            oracle
                .process_block(
                    &x[(4 + i) * block..(5 + i) * block],
                    &mut expect[i * block..(i + 1) * block],
                )
                .unwrap();
        }
        for i in 0..4 * block {
            assert_eq!(
                out[4 * block + i].to_bits(),
                expect[i].to_bits(),
                "suffix mismatch at {i}"
            );
        }
        // And the suffix genuinely differs from the no-swap stream.
        let offline_a_suffix = &offline_a[4 * block..];
        assert!(out[4 * block..]
            .iter()
            .zip(offline_a_suffix)
            .any(|(a, b)| a != b));
    }

    #[test]
    fn set_tone_same_weights_is_transparent() {
        let bundle = test_bundle(CondMode::Hypernet, 15);
        let phi = random_phi(12, 44);
        let x = noise(512, 9);
        let run = |with_reset: bool| -> Vec<f32> {
            let mut proc = StreamProcessor::new(&bundle, Some(&phi), 128).unwrap();
            let mut out = vec![0.0f32; 512];
            for i in 0..4 {
                if with_reset && i == 2 {
                    let tone = prepare_tone(&bundle, Some(&phi)).unwrap();
                    proc.set_tone(tone).unwrap();
                }
                proc.process_block(&x[i * 128..(i + 1) * 128], &mut out[i * 128..(i + 1) * 128])
                    .unwrap();
            }
            out
        };
        let a = run(false);
        let b = run(true);
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn rapid_double_set_tone_last_writer_wins() {
        let bundle = test_bundle(CondMode::Hypernet, 16);
        let phi_a = random_phi(12, 1);
        let phi_b = random_phi(12, 2);
        let phi_c = random_phi(12, 3);
        let x = noise(256, 4);
        let run = |stage_both: bool| -> Vec<f32> {
            let mut proc = StreamProcessor::new(&bundle, Some(&phi_a), 128).unwrap();
            let mut out = vec![0.0f32; 256];
            proc.process_block(&x[..128], &mut out[..128]).unwrap();
            if stage_both {
                proc.set_tone(prepare_tone(&bundle, Some(&phi_b)).unwrap())
                    .unwrap();
            }
            proc.set_tone(prepare_tone(&bundle, Some(&phi_c)).unwrap())
                .unwrap();
            proc.process_block(&x[128..], &mut out[128..]).unwrap();
            out
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn control_thread_can_stage_while_audio_runs() {
        let bundle = test_bundle(CondMode::Hypernet, 30);
        let phi_a = random_phi(12, 1);
        let phi_b = random_phi(12, 2);
        let mut proc = StreamProcessor::new(&bundle, Some(&phi_a), 64).unwrap();
        let sender = proc.tone_sender();
        let fingerprint_b = prepare_tone(&bundle, Some(&phi_b))
            .unwrap()
            .weights
            .fingerprint;

        std::thread::scope(|scope| {
            let control = scope.spawn(|| {
                for _ in 0..50 {
                    sender
                        .send(prepare_tone(&bundle, Some(&phi_b)).unwrap())
                        .unwrap();
                    std::thread::yield_now();
                }
            });
            let x = noise(64, 3);
            let mut out = vec![0.0f32; 64];
            for _ in 0..2000 {
                proc.process_block(&x, &mut out).unwrap();
                if proc.tone_fingerprint() == fingerprint_b {
                    break;
                }
            }
            control.join().unwrap();
            // One more block guarantees the last staged tone is installed.
            proc.process_block(&x, &mut out).unwrap();
        });
        assert_eq!(proc.tone_fingerprint(), fingerprint_b);
    }

    #[test]
    fn mismatched_tone_rejected_at_staging() {
        let bundle = test_bundle(CondMode::Hypernet, 17);
        let other = test_bundle(CondMode::Hypernet, 18); // same config, ok
        let mut small = other.clone();
        small.gcn.config.num_blocks = 3;
        let phi = random_phi(12, 5);
        let mut proc = StreamProcessor::new(&bundle, Some(&phi), 64).unwrap();
        let mut bad = prepare_tone(&other, Some(&phi)).unwrap();
        bad.weights.config.num_blocks = 3;
        bad.weights.config.dilations.pop();
        assert!(proc.set_tone(bad).is_err());
    }

    #[test]
    fn oversized_block_rejected() {
        let bundle = test_bundle(CondMode::None, 19);
        let mut proc = StreamProcessor::new(&bundle, None, 32).unwrap();
        let input = vec![0.0f32; 64];
        let mut out = vec![0.0f32; 64];
        assert!(proc.process_block(&input, &mut out).is_err());
    }

    #[test]
    fn bench_reports_positive_rtf() {
        let bundle = test_bundle(CondMode::None, 20);
        let report = bench_rtf(&bundle, None, 1.0, 256).unwrap();
        assert!(report.rtf > 0.0);
        assert!(report.worst_block_s > 0.0);
        assert!(report.samples_processed >= 44_100);
        assert!(report.to_text().contains("rtf"));
    }

    // Wall-clock properties; meaningful only on an otherwise idle core, so
    // they are opted into with --ignored.

    #[test]
    #[ignore = "timing-sensitive; run on quiet hardware"]
    fn rtf_is_independent_of_phi_within_five_percent() {
        let bundle = test_bundle(CondMode::Hypernet, 21);
        let a = bench_rtf(&bundle, Some(&random_phi(12, 1)), 3.0, 128).unwrap();
        let b = bench_rtf(&bundle, Some(&random_phi(12, 2)), 3.0, 128).unwrap();
        let ratio = a.rtf / b.rtf;
        assert!((0.95..=1.05).contains(&ratio), "rtf ratio {ratio}");
    }

    #[test]
    #[ignore = "timing-sensitive; run on quiet hardware"]
    fn doubling_duration_doubles_wall_time() {
        let bundle = test_bundle(CondMode::None, 22);
        let short = bench_rtf(&bundle, None, 2.0, 128).unwrap();
        let long = bench_rtf(&bundle, None, 4.0, 128).unwrap();
        let ratio = long.wall_s / short.wall_s;
        assert!((1.8..=2.2).contains(&ratio), "wall ratio {ratio}");
    }
}
