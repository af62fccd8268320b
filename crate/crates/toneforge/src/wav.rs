//! WAV (RIFF) reading and writing.
//!
//! Supports PCM 16/24-bit and IEEE float32, mono or stereo in, mono out.
//! Stereo is downmixed by channel averaging. Files whose rate differs from
//! the expected rate are rejected; this crate never resamples.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

const FMT_PCM: u16 = 1;
const FMT_IEEE_FLOAT: u16 = 3;
const FMT_EXTENSIBLE: u16 = 0xFFFE;

/// Output sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDepth {
    Pcm16,
    Float32,
}

struct FmtInfo {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn u16le(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32le(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a WAV file, downmix to mono, and validate against `expected_rate`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<AudioBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::format(path, detail);

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<FmtInfo> = None;
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32le(&bytes, off + 4) as usize;
        let body_start = off + 8;
        if body_start + size > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short"));
                }
                let mut format_tag = u16le(body, 0);
                if format_tag == FMT_EXTENSIBLE {
                    // First two bytes of the SubFormat GUID carry the real tag.
                    if size < 40 {
                        return Err(fail("extensible fmt chunk too short"));
                    }
                    format_tag = u16le(body, 24);
                }
                fmt = Some(FmtInfo {
                    format_tag,
                    channels: u16le(body, 2),
                    sample_rate: u32le(body, 4),
                    bits_per_sample: u16le(body, 14),
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        off = body_start + size + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    let data = data.ok_or_else(|| fail("missing data chunk"))?;

    if fmt.sample_rate != expected_rate {
        return Err(Error::RateMismatch {
            path: path.to_path_buf(),
            got: fmt.sample_rate,
            expected: expected_rate,
        });
    }
    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(fail(&format!("unsupported channel count {}", fmt.channels)));
    }

    let channels = fmt.channels as usize;
    let decode_frames =
        |bytes_per_sample: usize, decode: &dyn Fn(&[u8]) -> f32| -> Result<Vec<f32>> {
            let frame_bytes = bytes_per_sample * channels;
            if frame_bytes == 0 || data.len() % frame_bytes != 0 {
                return Err(fail("data chunk not a whole number of frames"));
            }
            let frames = data.len() / frame_bytes;
            let mut out = Vec::with_capacity(frames);
            for f in 0..frames {
                let mut acc = 0.0f32;
                for c in 0..channels {
                    let start = f * frame_bytes + c * bytes_per_sample;
                    acc += decode(&data[start..start + bytes_per_sample]);
                }
                out.push(acc / channels as f32);
            }
            Ok(out)
        };

    let samples = match (fmt.format_tag, fmt.bits_per_sample) {
        (FMT_PCM, 16) => decode_frames(2, &|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)?,
        (FMT_PCM, 24) => decode_frames(3, &|b| {
            let v = ((b[2] as i32) << 24 | (b[1] as i32) << 16 | (b[0] as i32) << 8) >> 8;
            v as f32 / 8_388_608.0
        })?,
        (FMT_IEEE_FLOAT, 32) => {
            decode_frames(4, &|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))?
        }
        (tag, bits) => {
            return Err(fail(&format!(
                "unsupported codec: format tag {tag}, {bits} bits per sample"
            )))
        }
    };

    AudioBuffer::new(samples, fmt.sample_rate)
}

/// Write a mono WAV file. Float32 writes are lossless; pcm16 rounds to the
/// nearest code and clamps out-of-range samples (with a warning).
pub fn write_wav(path: &Path, buf: &AudioBuffer, depth: SampleDepth) -> Result<()> {
    let n = buf.len();
    let (format_tag, bits, payload): (u16, u16, Vec<u8>) = match depth {
        SampleDepth::Pcm16 => {
            let mut bytes = Vec::with_capacity(n * 2);
            let mut clipped = 0usize;
            for &s in buf.samples() {
                let scaled = (s as f64 * 32768.0).round();
                let code = if scaled > 32767.0 {
                    clipped += 1;
                    32767
                } else if scaled < -32768.0 {
                    clipped += 1;
                    -32768
                } else {
                    scaled as i32
                };
                bytes.extend_from_slice(&(code as i16).to_le_bytes());
            }
            if clipped > 0 {
                eprintln!(
                    "warning: {clipped} sample(s) clipped writing pcm16 to {}",
                    path.display()
                );
            }
            (FMT_PCM, 16, bytes)
        }
        SampleDepth::Float32 => {
            let mut bytes = Vec::with_capacity(n * 4);
            for &s in buf.samples() {
                bytes.extend_from_slice(&s.to_le_bytes());
            }
            (FMT_IEEE_FLOAT, 32, bytes)
        }
    };

    let block_align = (bits / 8) as u16;
    let byte_rate = buf.sample_rate() * block_align as u32;
    let data_len = payload.len() as u32;

    let mut out = Vec::with_capacity(44 + payload.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&buf.sample_rate().to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&payload);

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
