//! Property tests over the crate's algebraic invariants.

use proptest::prelude::*;

use toneforge::amp::{waveshape, Shaper};
use toneforge::audio::{peak_normalize, AudioBuffer};
use toneforge::cond::modulate_weights;
use toneforge::nn::conv::dilated_causal_conv;
use toneforge::train::{esr, pre_emphasis};

fn finite_samples(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn peak_normalize_hits_target_and_is_idempotent(
        samples in finite_samples(256),
        target in 0.05f32..1.0,
    ) {
        let buf = AudioBuffer::new(samples, 44_100).unwrap();
        let normalized = peak_normalize(&buf, target).unwrap();
        if buf.peak() > 0.0 {
            prop_assert!((normalized.peak() - target).abs() <= target * 1e-5);
            let again = peak_normalize(&normalized, target).unwrap();
            for (a, b) in normalized.samples().iter().zip(again.samples()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        } else {
            prop_assert_eq!(normalized.samples(), buf.samples());
        }
    }

    #[test]
    fn esr_is_nonnegative_and_zero_only_on_match(
        target in finite_samples(128),
    ) {
        let value = esr(&target, &target).unwrap();
        prop_assert_eq!(value, 0.0);
        let mut off = target.clone();
        off[0] += 0.5;
        let nonzero = esr(&target, &off).unwrap();
        prop_assert!(nonzero > 0.0);
    }

    #[test]
    fn pre_emphasis_with_zero_alpha_is_identity(x in finite_samples(128)) {
        prop_assert_eq!(pre_emphasis(&x, 0.0f32), x);
    }

    #[test]
    fn modulation_law_matches_direct_oracle(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-1.0f64..1.0, 2),
        dw in prop::collection::vec(-1.5f64..1.5, 2),
        db in prop::collection::vec(-1.5f64..1.5, 2),
    ) {
        // [c_out=2, c_in=3, k=2], per-channel dw broadcast.
        let mut w_out = vec![0.0; 12];
        let mut b_out = vec![0.0; 2];
        modulate_weights(&w, &b, &dw, &db, [2, 3, 2], &mut w_out, &mut b_out).unwrap();
        for c in 0..2 {
            for i in 0..6 {
                let direct = w[c * 6 + i] * (1.0 + dw[c]);
                prop_assert_eq!(w_out[c * 6 + i], direct);
            }
            prop_assert_eq!(b_out[c], b[c] * (1.0 + db[c]));
        }
    }

    #[test]
    fn conv_is_causal_for_random_shapes(
        seed in 0u64..1000,
        t_perturb in 4usize..30,
    ) {
        let mut rng = toneforge::rng::Rng::new(seed);
        let t = 32;
        let (c_in, c_out) = (1 + rng.below(3), 1 + rng.below(3));
        let k = 2 + rng.below(2);
        let d = 1 + rng.below(4);
        let x: Vec<f64> = (0..c_in * t).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.normal()).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.normal()).collect();
        let y = dilated_causal_conv(&x, &w, &bias, c_out, c_in, k, d, t).unwrap();
        let mut x2 = x.clone();
        x2[t_perturb] += 1.0;
        let y2 = dilated_causal_conv(&x2, &w, &bias, c_out, c_in, k, d, t).unwrap();
        for c in 0..c_out {
            for tt in 0..t_perturb {
                prop_assert_eq!(y[c * t + tt], y2[c * t + tt]);
            }
        }
    }

    #[test]
    fn conv_superposition_in_input(seed in 0u64..1000) {
        let mut rng = toneforge::rng::Rng::new(seed);
        let t = 24;
        let (c_in, c_out, k, d) = (2, 2, 3, 2);
        let mk = |rng: &mut toneforge::rng::Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.normal()).collect()
        };
        let x1 = mk(&mut rng, c_in * t);
        let x2 = mk(&mut rng, c_in * t);
        let w = mk(&mut rng, c_out * c_in * k);
        let zero_b = vec![0.0; c_out];
        let y1 = dilated_causal_conv(&x1, &w, &zero_b, c_out, c_in, k, d, t).unwrap();
        let y2 = dilated_causal_conv(&x2, &w, &zero_b, c_out, c_in, k, d, t).unwrap();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let ys = dilated_causal_conv(&sum, &w, &zero_b, c_out, c_in, k, d, t).unwrap();
        for i in 0..ys.len() {
            prop_assert!((ys[i] - (y1[i] + y2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn tanh_shaper_is_bounded_and_odd(
        x in finite_samples(64),
        g in 0.1f64..30.0,
    ) {
        let y = waveshape(&x, Shaper::Tanh, g, 1.0);
        for v in &y {
            prop_assert!(v.abs() <= 1.0 + 1e-6);
        }
        let neg: Vec<f32> = x.iter().map(|v| -v).collect();
        let yn = waveshape(&neg, Shaper::Tanh, g, 1.0);
        for (a, b) in y.iter().zip(&yn) {
            prop_assert!((a + b).abs() < 1e-6);
        }
    }

    #[test]
    fn wav_float32_round_trip_is_exact(samples in finite_samples(512)) {
        let dir = std::env::temp_dir().join(format!("toneforge-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prop_f32.wav");
        let buf = AudioBuffer::new(samples, 44_100).unwrap();
        toneforge::wav::write_wav(&path, &buf, toneforge::wav::SampleDepth::Float32).unwrap();
        let back = toneforge::wav::read_wav(&path, 44_100).unwrap();
        prop_assert_eq!(back.samples(), buf.samples());
    }

    #[test]
    fn wav_pcm16_round_trip_within_one_lsb(samples in finite_samples(512)) {
        let dir = std::env::temp_dir().join(format!("toneforge-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prop_p16.wav");
        let buf = AudioBuffer::new(samples, 44_100).unwrap();
        toneforge::wav::write_wav(&path, &buf, toneforge::wav::SampleDepth::Pcm16).unwrap();
        let back = toneforge::wav::read_wav(&path, 44_100).unwrap();
        for (a, b) in buf.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32_768.0);
        }
    }
}

/// Spec property: grad_check stays below threshold on randomized small
/// configurations, >= 20 seeds.
#[test]
fn gradient_battery_over_twenty_seeds() {
    let seeds: Vec<u64> = (100..120).collect();
    let summary = toneforge::verify::gradient_battery(&seeds).unwrap();
    assert!(summary.passed(), "\n{}", summary.to_text());
}
