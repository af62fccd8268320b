//! Mono audio buffers and level utilities.

use crate::error::{Error, Result};

/// Single sample rate per run; corpora and models reject anything else.
pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// A mono sample sequence with its sample rate. Samples are nominally in
/// [-1, 1] and always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(idx) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample at index {idx} in audio buffer"
            )));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        AudioBuffer {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Contiguous crop [start, start+len).
    pub fn crop(&self, start: usize, len: usize) -> Result<AudioBuffer> {
        if start + len > self.samples.len() {
            return Err(Error::Contract(format!(
                "crop [{start}, {}) exceeds buffer length {}",
                start + len,
                self.samples.len()
            )));
        }
        Ok(AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }
}

/// Scale so that max |sample| equals `target_peak`. All-zero input is
/// returned unchanged.
pub fn peak_normalize(buf: &AudioBuffer, target_peak: f32) -> Result<AudioBuffer> {
    if !(target_peak > 0.0 && target_peak <= 1.0) {
        return Err(Error::Contract(format!(
            "target peak {target_peak} outside (0, 1]"
        )));
    }
    let peak = buf.peak();
    if peak == 0.0 {
        return Ok(buf.clone());
    }
    let gain = target_peak / peak;
    let samples = buf.samples.iter().map(|&s| s * gain).collect();
    AudioBuffer::new(samples, buf.sample_rate)
}
