//! Corpus construction: synthetic clean performances, paired wet renders for
//! every (content, preset) pair, and a line-delimited manifest that makes the
//! whole corpus reproducible from its seed.
//!
//! Manifest format (UTF-8, whitespace-separated fields, one record per line):
//!
//! ```text
//! toneforge-corpus v1
//! seed <u64>
//! sample_rate <hz>
//! preset <id> <pre_gain_db> <shaper> <shaper_param> \
//!        <c1> <q1> <g1> <c2> <q2> <g2> <c3> <q3> <g3> <cab_idx> <post_gain_db>
//! content <id> <clean_path> <train|heldout>
//! entry <preset_id> <content_id> <train|heldout_tone|heldout_content> <wet_path>
//! ```
//!
//! Floats are printed with Rust's shortest round-trip formatting, so parsing
//! recovers them exactly. Held-out-tone preset ids never appear in a train
//! entry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::amp::{render_preset, sample_presets, Shaper, TonePreset, ToneStackBand};
use crate::audio::{peak_normalize, AudioBuffer};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::wav::{read_wav, write_wav, SampleDepth};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldoutTone,
    HeldoutContent,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldoutTone => "heldout_tone",
            Split::HeldoutContent => "heldout_content",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout_tone" => Ok(Split::HeldoutTone),
            "heldout_content" => Ok(Split::HeldoutContent),
            other => Err(Error::Contract(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContentRecord {
    pub id: u32,
    pub clean_path: PathBuf,
    pub heldout: bool,
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub preset_id: u32,
    pub content_id: u32,
    pub split: Split,
    pub wet_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub seed: u64,
    pub sample_rate: u32,
    pub presets: Vec<TonePreset>,
    pub contents: Vec<ContentRecord>,
    pub entries: Vec<CorpusEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn heldout_preset_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::HeldoutTone)
            .map(|e| e.preset_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn train_preset_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.preset_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Held-out tone presets must never appear in the train split.
    pub fn validate(&self) -> Result<()> {
        let held = self.heldout_preset_ids();
        for e in &self.entries {
            if e.split == Split::Train && held.contains(&e.preset_id) {
                return Err(Error::Contract(format!(
                    "heldout tone preset {} leaked into train split",
                    e.preset_id
                )));
            }
        }
        let preset_ids: Vec<u32> = self.presets.iter().map(|p| p.id).collect();
        for e in &self.entries {
            if !preset_ids.contains(&e.preset_id) {
                return Err(Error::Contract(format!(
                    "entry references unknown preset {}",
                    e.preset_id
                )));
            }
        }
        Ok(())
    }

    pub fn preset(&self, id: u32) -> Result<&TonePreset> {
        self.presets
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Contract(format!("unknown preset id {id}")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("toneforge-corpus v1\n");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "sample_rate {}", self.sample_rate);
        for p in &self.presets {
            let _ = write!(
                out,
                "preset {} {} {} {}",
                p.id,
                p.pre_gain_db,
                p.shaper.as_str(),
                p.shaper_param
            );
            for b in &p.tone_stack {
                let _ = write!(out, " {} {} {}", b.center_hz, b.q, b.gain_db);
            }
            let _ = writeln!(out, " {} {}", p.cab_ir_index, p.post_gain_db);
        }
        for c in &self.contents {
            let _ = writeln!(
                out,
                "content {} {} {}",
                c.id,
                c.clean_path.display(),
                if c.heldout { "heldout" } else { "train" }
            );
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "entry {} {} {} {}",
                e.preset_id,
                e.content_id,
                e.split.as_str(),
                e.wet_path.display()
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<CorpusManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, root, path)
    }

    fn parse(text: &str, root: PathBuf, path: &Path) -> Result<CorpusManifest> {
        let fail = |line: usize, msg: &str| Error::format(path, format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "toneforge-corpus v1")) => {}
            _ => return Err(Error::format(path, "missing 'toneforge-corpus v1' header")),
        }
        let mut seed = None;
        let mut sample_rate = None;
        let mut presets = Vec::new();
        let mut contents = Vec::new();
        let mut entries = Vec::new();
        for (ln, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut tok = line.split_whitespace();
            let kind = tok.next().unwrap();
            let mut next = |what: &str| -> Result<&str> {
                tok.next()
                    .ok_or_else(|| fail(ln + 1, &format!("missing {what}")))
            };
            match kind {
                "seed" => seed = Some(parse_num::<u64>(next("seed")?, ln, path)?),
                "sample_rate" => {
                    sample_rate = Some(parse_num::<u32>(next("sample_rate")?, ln, path)?)
                }
                "preset" => {
                    let id = parse_num::<u32>(next("id")?, ln, path)?;
                    let pre_gain_db = parse_num::<f64>(next("pre_gain")?, ln, path)?;
                    let shaper =
                        Shaper::parse(next("shaper")?).map_err(|_| fail(ln + 1, "bad shaper"))?;
                    let shaper_param = parse_num::<f64>(next("shaper_param")?, ln, path)?;
                    let mut bands = [ToneStackBand {
                        center_hz: 0.0,
                        q: 0.0,
                        gain_db: 0.0,
                    }; 3];
                    for band in bands.iter_mut() {
                        band.center_hz = parse_num::<f64>(next("center")?, ln, path)?;
                        band.q = parse_num::<f64>(next("q")?, ln, path)?;
                        band.gain_db = parse_num::<f64>(next("gain")?, ln, path)?;
                    }
                    let cab_ir_index = parse_num::<usize>(next("cab")?, ln, path)?;
                    let post_gain_db = parse_num::<f64>(next("post_gain")?, ln, path)?;
                    presets.push(TonePreset {
                        id,
                        pre_gain_db,
                        shaper,
                        shaper_param,
                        tone_stack: bands,
                        cab_ir_index,
                        post_gain_db,
                    });
                }
                "content" => {
                    let id = parse_num::<u32>(next("id")?, ln, path)?;
                    let clean_path = PathBuf::from(next("path")?);
                    let heldout = match next("split")? {
                        "train" => false,
                        "heldout" => true,
                        other => return Err(fail(ln + 1, &format!("bad content split '{other}'"))),
                    };
                    contents.push(ContentRecord {
                        id,
                        clean_path,
                        heldout,
                    });
                }
                "entry" => {
                    let preset_id = parse_num::<u32>(next("preset")?, ln, path)?;
                    let content_id = parse_num::<u32>(next("content")?, ln, path)?;
                    let split =
                        Split::parse(next("split")?).map_err(|_| fail(ln + 1, "bad split"))?;
                    let wet_path = PathBuf::from(next("wet path")?);
                    entries.push(CorpusEntry {
                        preset_id,
                        content_id,
                        split,
                        wet_path,
                    });
                }
                other => return Err(fail(ln + 1, &format!("unknown record '{other}'"))),
            }
        }
        let manifest = CorpusManifest {
            seed: seed.ok_or_else(|| Error::format(path, "missing seed"))?,
            sample_rate: sample_rate.ok_or_else(|| Error::format(path, "missing sample_rate"))?,
            presets,
            contents,
            entries,
            root,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {}: bad number '{s}'", line + 1)))
}

/// Seeded pseudo-performance: Karplus-Strong plucks walking a minor
/// pentatonic box, occasionally doubled at the fifth.
pub fn synth_performance(seed: u64, duration_s: f64, sample_rate: u32) -> Result<AudioBuffer> {
    let mut rng = Rng::new(seed);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut out = vec![0.0f32; n];
    // E minor pentatonic from E2 over two octaves.
    let semitones = [0, 3, 5, 7, 10, 12, 15, 17, 19, 22, 24];
    let root = 82.407;

    let mut t = 0usize;
    while t < n {
        let step = semitones[rng.below(semitones.len())];
        let freq = root * 2f64.powf(step as f64 / 12.0);
        let velocity = rng.range_f64(0.4, 1.0);
        let note_len = (rng.range_f64(0.18, 0.45) * sample_rate as f64) as usize;
        pluck(&mut out, t, freq, velocity, sample_rate, &mut rng);
        if rng.next_f64() < 0.25 {
            pluck(
                &mut out,
                t,
                freq * 1.5,
                velocity * 0.7,
                sample_rate,
                &mut rng,
            );
        }
        t += note_len.max(1);
    }

    let buf = AudioBuffer::new(out, sample_rate)?;
    peak_normalize(&buf, 0.7)
}

fn pluck(out: &mut [f32], start: usize, freq: f64, velocity: f64, sample_rate: u32, rng: &mut Rng) {
    let period = (sample_rate as f64 / freq).round() as usize;
    if period < 2 || start >= out.len() {
        return;
    }
    let decay = 0.996f64;
    let tail = (sample_rate as usize) * 3 / 2;
    let len = (out.len() - start).min(tail);
    let mut delay: Vec<f64> = (0..period)
        .map(|_| rng.range_f64(-1.0, 1.0) * velocity)
        .collect();
    let mut idx = 0usize;
    let mut prev = 0.0f64;
    for i in 0..len {
        let cur = delay[idx];
        let next = decay * 0.5 * (cur + prev);
        prev = cur;
        delay[idx] = next;
        idx = (idx + 1) % period;
        out[start + i] += cur as f32 * 0.6;
    }
}

/// Worker count for corpus rendering: TONEFORGE_THREADS, else the host's
/// available parallelism.
fn render_threads() -> usize {
    std::env::var("TONEFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// How a corpus is split.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    /// Last n presets are held out as unseen tones.
    pub heldout_presets: usize,
    /// Last n contents are held out as unseen performances.
    pub heldout_contents: usize,
}

/// Render every (content, preset) pair into `out_dir`, write clean WAVs and
/// the manifest. Wet files are pcm16, clean files float32.
pub fn build_corpus(
    clean: &[AudioBuffer],
    presets: &[TonePreset],
    split: SplitSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    if presets.len() < 2 || split.heldout_presets >= presets.len() {
        return Err(Error::Contract(format!(
            "need >= 2 presets and heldout_presets < total ({} / {})",
            split.heldout_presets,
            presets.len()
        )));
    }
    if clean.len() < 2 || split.heldout_contents >= clean.len() {
        return Err(Error::Contract(format!(
            "need >= 2 clean performances and heldout_contents < total ({} / {})",
            split.heldout_contents,
            clean.len()
        )));
    }
    let sample_rate = clean[0].sample_rate();
    if clean.iter().any(|c| c.sample_rate() != sample_rate) {
        return Err(Error::Contract("mixed sample rates in clean set".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let first_heldout_preset = presets.len() - split.heldout_presets;
    let first_heldout_content = clean.len() - split.heldout_contents;

    let mut contents = Vec::new();
    for (ci, buf) in clean.iter().enumerate() {
        let rel = PathBuf::from(format!("clean_{ci}.wav"));
        write_wav(&out_dir.join(&rel), buf, SampleDepth::Float32)?;
        contents.push(ContentRecord {
            id: ci as u32,
            clean_path: rel,
            heldout: ci >= first_heldout_content,
        });
    }

    // Entry list is fixed up front; rendering parallelizes over independent
    // (preset, content) pairs, so file contents and manifest order do not
    // depend on scheduling. Thread count honors TONEFORGE_THREADS.
    let mut entries = Vec::new();
    for (pi, preset) in presets.iter().enumerate() {
        for ci in 0..clean.len() {
            let split_label = if pi >= first_heldout_preset {
                Split::HeldoutTone
            } else if ci >= first_heldout_content {
                Split::HeldoutContent
            } else {
                Split::Train
            };
            entries.push(CorpusEntry {
                preset_id: preset.id,
                content_id: ci as u32,
                split: split_label,
                wet_path: PathBuf::from(format!("wet_p{}_c{ci}.wav", preset.id)),
            });
        }
    }

    let jobs: Vec<(usize, usize)> = (0..presets.len())
        .flat_map(|pi| (0..clean.len()).map(move |ci| (pi, ci)))
        .collect();
    let threads = render_threads().min(jobs.len().max(1));
    let failures: std::sync::Mutex<Vec<Error>> = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for chunk in jobs.chunks(jobs.len().div_ceil(threads)) {
            let failures = &failures;
            scope.spawn(move || {
                for &(pi, ci) in chunk {
                    let result = render_preset(&clean[ci], &presets[pi]).and_then(|wet| {
                        let rel = format!("wet_p{}_c{ci}.wav", presets[pi].id);
                        write_wav(&out_dir.join(rel), &wet, SampleDepth::Pcm16)
                    });
                    if let Err(e) = result {
                        failures.lock().unwrap().push(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failures.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }

    let manifest = CorpusManifest {
        seed,
        sample_rate,
        presets: presets.to_vec(),
        contents,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Convenience: synthesize performances, sample presets, build.
pub fn build_synthetic_corpus(
    n_presets: usize,
    heldout_presets: usize,
    n_performances: usize,
    heldout_performances: usize,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    let rng = Rng::new(seed);
    let presets = sample_presets(n_presets, rng.derive_seed(1));
    let clean: Vec<AudioBuffer> = (0..n_performances)
        .map(|i| synth_performance(rng.derive_seed(1000 + i as u64), duration_s, sample_rate))
        .collect::<Result<_>>()?;
    build_corpus(
        &clean,
        &presets,
        SplitSpec {
            heldout_presets,
            heldout_contents: heldout_performances,
        },
        seed,
        out_dir,
    )
}

/// A corpus decoded into memory, ready for training and evaluation.
pub struct LoadedCorpus {
    pub manifest: CorpusManifest,
    /// Clean audio, indexed like `manifest.contents`.
    pub clean: Vec<AudioBuffer>,
    /// Wet audio keyed by (preset_id, content_id).
    pub wet: BTreeMap<(u32, u32), AudioBuffer>,
}

impl LoadedCorpus {
    pub fn load(manifest_path: &Path) -> Result<LoadedCorpus> {
        let manifest = CorpusManifest::read(manifest_path)?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(manifest: CorpusManifest) -> Result<LoadedCorpus> {
        let mut clean = Vec::new();
        for c in &manifest.contents {
            clean.push(read_wav(
                &manifest.root.join(&c.clean_path),
                manifest.sample_rate,
            )?);
        }
        let mut wet = BTreeMap::new();
        for e in &manifest.entries {
            let buf = read_wav(&manifest.root.join(&e.wet_path), manifest.sample_rate)?;
            wet.insert((e.preset_id, e.content_id), buf);
        }
        Ok(LoadedCorpus {
            manifest,
            clean,
            wet,
        })
    }

    pub fn wet_clip(&self, preset_id: u32, content_id: u32) -> Result<&AudioBuffer> {
        self.wet.get(&(preset_id, content_id)).ok_or_else(|| {
            Error::Contract(format!(
                "no wet clip for preset {preset_id}, content {content_id}"
            ))
        })
    }
}
