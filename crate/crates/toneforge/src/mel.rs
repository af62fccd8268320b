//! Log-mel feature front-end for the tone encoder: magnitude STFT with a
//! symmetric Hann window, triangular HTK-spaced mel filterbank, log
//! compression, then mean and standard deviation pooling over time.

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub mel_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            fft_size: 2048,
            hop: 512,
            mel_bands: 64,
            fmin: 30.0,
            fmax: 16_000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Contract(format!(
                "fft_size {} must be a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.mel_bands == 0 {
            return Err(Error::Contract("hop and mel_bands must be >= 1".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if self.fmax > nyquist {
            return Err(Error::Contract(format!(
                "fmax {} exceeds Nyquist {nyquist}",
                self.fmax
            )));
        }
        if self.fmin < 0.0 || self.fmin >= self.fmax {
            return Err(Error::Contract("need 0 <= fmin < fmax".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Contract("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Output feature length: per-band mean and std, concatenated.
    pub fn feature_len(&self) -> usize {
        2 * self.mel_bands
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// In-place iterative radix-2 FFT (decimation in time).
pub fn fft_radix2(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    debug_assert_eq!(im.len(), n);

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
    }

    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_re, mut cur_im) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (a, b) = (i + k, i + k + len / 2);
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Triangular mel filterbank over magnitude-spectrum bins [0, fft/2].
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub bands: usize,
    pub bins: usize,
    /// Row-major [bands, bins], triangle peak 1.
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let bins = cfg.fft_size / 2 + 1;
        let bands = cfg.mel_bands;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; bands * bins];
        for b in 0..bands {
            let (lo, ctr, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= ctr {
                    (f - lo) / (ctr - lo)
                } else {
                    (hi - f) / (hi - ctr)
                };
                weights[b * bins + k] = w;
            }
        }
        Ok(MelFilterbank {
            bands,
            bins,
            weights,
        })
    }

    pub fn apply(&self, magnitudes: &[f64], out: &mut [f64]) {
        debug_assert_eq!(magnitudes.len(), self.bins);
        debug_assert_eq!(out.len(), self.bands);
        for b in 0..self.bands {
            let row = &self.weights[b * self.bins..(b + 1) * self.bins];
            let mut acc = 0.0;
            for (w, m) in row.iter().zip(magnitudes) {
                acc += w * m;
            }
            out[b] = acc;
        }
    }
}

/// Symmetric Hann window; symmetric so that time-reversed audio yields the
/// same per-frame magnitude spectra.
fn hann_symmetric(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// Per-band mean and standard deviation of the log-mel trajectory,
/// concatenated: [mean_0..mean_B, std_0..std_B].
pub fn log_mel_stats(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<f64>> {
    let bank = MelFilterbank::new(cfg, audio.sample_rate())?;
    if audio.len() < cfg.fft_size {
        return Err(Error::Contract(format!(
            "audio length {} below fft_size {}",
            audio.len(),
            cfg.fft_size
        )));
    }
    let n = cfg.fft_size;
    let frames = 1 + (audio.len() - n) / cfg.hop;
    let window = hann_symmetric(n);
    let samples = audio.samples();

    let bands = cfg.mel_bands;
    let mut sum = vec![0.0f64; bands];
    let mut sum_sq = vec![0.0f64; bands];
    let mut re = vec![0.0f64; n];
    let mut im = vec![0.0f64; n];
    let mut mags = vec![0.0f64; n / 2 + 1];
    let mut mel = vec![0.0f64; bands];

    for fi in 0..frames {
        let start = fi * cfg.hop;
        for i in 0..n {
            re[i] = samples[start + i] as f64 * window[i];
            im[i] = 0.0;
        }
        fft_radix2(&mut re, &mut im);
        for (k, m) in mags.iter_mut().enumerate() {
            *m = (re[k] * re[k] + im[k] * im[k]).sqrt();
        }
        bank.apply(&mags, &mut mel);
        for b in 0..bands {
            let v = (mel[b] + cfg.log_floor).ln();
            sum[b] += v;
            sum_sq[b] += v * v;
        }
    }

    let fcount = frames as f64;
    let mut out = vec![0.0f64; 2 * bands];
    for b in 0..bands {
        let mean = sum[b] / fcount;
        let var = (sum_sq[b] / fcount - mean * mean).max(0.0);
        out[b] = mean;
        out[bands + b] = var.sqrt();
    }
    Ok(out)
}
