//! Model persistence: one self-describing file bundling the generator, the
//! conditioning network, and the frozen encoder.
//!
//! On-disk layout:
//!
//! ```text
//! toneforge-model v1\n
//! sample_rate <hz>\n
//! gcn blocks=<n> channels=<c> kernel=<k> skip=<cs>\n
//! dilations <d0> <d1> ...\n
//! cond <none|film|hypernet> [granularity=<per_channel|full>] [hidden=<h>] d_e=<n>\n
//! mel fft=<n> hop=<n> bands=<n> fmin=<hz> fmax=<hz> floor=<v>\n
//! encoder hidden=<n> frozen=<true|false>\n
//! tensor <name> <dim0> <dim1> ...\n            (one line per tensor, in payload order)
//! payload_len <bytes>\n
//! HEADER_END\n
//! <payload: little-endian f32 arrays, in declared tensor order>
//! <crc: 4 bytes little-endian, CRC-32 (IEEE) over header bytes + payload>
//! ```
//!
//! Loading rejects unknown versions, checksum mismatches, and any shape
//! inconsistency. A save/load round trip reproduces every weight bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::audio::AudioBuffer;
use crate::cond::{Conditioning, FilmGenerator, Granularity, HyperNetwork, ToneEmbedding};
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::gcn::{gcn_forward, CondMode, FilmParams, GcnConfig, GcnModel};
use crate::mel::MelConfig;
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;

const MAGIC: &str = "toneforge-model v1";

/// The complete system: generator, conditioning, encoder.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub sample_rate: u32,
    pub gcn: GcnModel<f32>,
    pub cond: Conditioning<f32>,
    pub encoder: EncoderWeights,
}

impl ModelBundle {
    /// Fresh bundle: seeded generator, identity-initialized conditioning.
    pub fn init(
        gcn_config: GcnConfig,
        granularity: Granularity,
        hyper_hidden: usize,
        encoder: EncoderWeights,
        seed: u64,
    ) -> Result<ModelBundle> {
        let rng = Rng::new(seed);
        let gcn = GcnModel::init(gcn_config, &mut rng.derive(1))?;
        let d_e = encoder.config.embedding_dim;
        let cond = match gcn.config.cond_mode {
            CondMode::None => Conditioning::None,
            CondMode::Film => Conditioning::Film(FilmGenerator::init(
                gcn.config.num_blocks,
                gcn.config.channels,
                d_e,
            )),
            CondMode::Hypernet => Conditioning::Hyper(HyperNetwork::init(
                &gcn,
                d_e,
                hyper_hidden,
                granularity,
                &mut rng.derive(2),
            )),
        };
        Ok(ModelBundle {
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            gcn,
            cond,
            encoder,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.config.embedding_dim
    }

    pub fn encode_reference(&self, reference: &AudioBuffer) -> Result<ToneEmbedding> {
        encode(reference, &self.encoder)
    }

    /// Offline render with optional conditioning, dispatching on cond mode.
    pub fn forward_offline(&self, x: &[f32], phi: Option<&ToneEmbedding>) -> Result<Vec<f32>> {
        match (&self.cond, phi) {
            (Conditioning::None, _) => gcn_forward(&self.gcn, None, x),
            (Conditioning::Film(fg), Some(p)) => {
                let params: FilmParams<f32> = fg.params_for(p.vector())?;
                gcn_forward(&self.gcn, Some(&params), x)
            }
            (Conditioning::Hyper(h), Some(p)) => {
                let baked = crate::cond::bake(&self.gcn, h, p)?;
                crate::gcn::gcn_forward_weights(&baked, &self.gcn.config, None, x)
            }
            (_, None) => Err(Error::Contract(
                "conditioned model requires a tone embedding".into(),
            )),
        }
    }

    /// Short config digest used in reports.
    pub fn config_digest(&self) -> String {
        let c = &self.gcn.config;
        let cond = match &self.cond {
            Conditioning::None => "none".to_string(),
            Conditioning::Film(f) => format!("film(d_e={})", f.d_e),
            Conditioning::Hyper(h) => format!(
                "hypernet(d_e={}, hidden={}, {})",
                h.d_e,
                h.hidden,
                h.granularity.as_str()
            ),
        };
        format!(
            "gcn{}x{}k{}s{}-{}",
            c.num_blocks, c.channels, c.kernel_size, c.skip_channels, cond
        )
    }

    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out: Vec<TensorRef<'_>> = self
            .gcn
            .tensors()
            .into_iter()
            .map(TensorRef::Param)
            .collect();
        out.extend(self.cond.tensors().into_iter().map(TensorRef::Param));
        out.extend(self.encoder.tensors().into_iter().map(TensorRef::Param));
        out.push(TensorRef::Raw("enc.feat_mean", &self.encoder.feat_mean));
        out.push(TensorRef::Raw("enc.feat_std", &self.encoder.feat_std));
        out
    }
}

enum TensorRef<'a> {
    Param(&'a ParamTensor<f32>),
    Raw(&'static str, &'a [f32]),
}

impl<'a> TensorRef<'a> {
    fn name(&self) -> &str {
        match self {
            TensorRef::Param(p) => p.name(),
            TensorRef::Raw(n, _) => n,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Param(p) => p.shape().to_vec(),
            TensorRef::Raw(_, v) => vec![v.len()],
        }
    }

    fn values(&self) -> &[f32] {
        match self {
            TensorRef::Param(p) => p.values(),
            TensorRef::Raw(_, v) => v,
        }
    }
}

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn save_model(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let tensors = bundle.tensors();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let _ = writeln!(header, "sample_rate {}", bundle.sample_rate);
    let c = &bundle.gcn.config;
    let _ = writeln!(
        header,
        "gcn blocks={} channels={} kernel={} skip={}",
        c.num_blocks, c.channels, c.kernel_size, c.skip_channels
    );
    let _ = write!(header, "dilations");
    for d in &c.dilations {
        let _ = write!(header, " {d}");
    }
    header.push('\n');
    match &bundle.cond {
        Conditioning::None => {
            let _ = writeln!(header, "cond none d_e={}", bundle.embedding_dim());
        }
        Conditioning::Film(f) => {
            let _ = writeln!(header, "cond film d_e={}", f.d_e);
        }
        Conditioning::Hyper(h) => {
            let _ = writeln!(
                header,
                "cond hypernet granularity={} hidden={} d_e={}",
                h.granularity.as_str(),
                h.hidden,
                h.d_e
            );
        }
    }
    let m = &bundle.encoder.config.mel;
    let _ = writeln!(
        header,
        "mel fft={} hop={} bands={} fmin={} fmax={} floor={}",
        m.fft_size, m.hop, m.mel_bands, m.fmin, m.fmax, m.log_floor
    );
    let _ = writeln!(
        header,
        "encoder hidden={} frozen={}",
        bundle.encoder.config.hidden,
        bundle.encoder.is_frozen()
    );
    let mut payload_len = 0usize;
    for t in &tensors {
        let _ = write!(header, "tensor {}", t.name());
        for d in t.shape() {
            let _ = write!(header, " {d}");
        }
        header.push('\n');
        payload_len += t.values().len() * 4;
    }
    let _ = writeln!(header, "payload_len {payload_len}");
    header.push_str("HEADER_END\n");

    let mut bytes = header.into_bytes();
    bytes.reserve(payload_len + 4);
    for t in &tensors {
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct KvLine<'a> {
    values: Vec<(&'a str, &'a str)>,
}

impl<'a> KvLine<'a> {
    fn parse(rest: &'a str) -> Self {
        KvLine {
            values: rest
                .split_whitespace()
                .filter_map(|tok| tok.split_once('='))
                .collect(),
        }
    }

    fn get<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("missing or bad field '{key}'")))
    }
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::format(path, "file too short"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let marker = b"HEADER_END\n";
    let header_end = body
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing HEADER_END"))?;
    let header = std::str::from_utf8(&body[..header_end])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let payload = &body[header_end + marker.len()..];

    let mut lines = header.lines();
    let first = lines.next().unwrap_or_default();
    if first != MAGIC {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: first.to_string(),
        });
    }

    let mut sample_rate = None;
    let mut gcn_line = None;
    let mut dilations: Option<Vec<usize>> = None;
    let mut cond_line: Option<String> = None;
    let mut mel_line = None;
    let mut encoder_line = None;
    let mut tensor_decls: Vec<(String, Vec<usize>)> = Vec::new();
    let mut payload_len = None;

    for line in lines {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "sample_rate" => {
                sample_rate = Some(
                    rest.trim()
                        .parse::<u32>()
                        .map_err(|_| Error::format(path, "bad sample_rate"))?,
                )
            }
            "gcn" => gcn_line = Some(KvLine::parse(rest)),
            "dilations" => {
                dilations = Some(
                    rest.split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::format(path, "bad dilations"))?,
                )
            }
            "cond" => cond_line = Some(rest.to_string()),
            "mel" => mel_line = Some(KvLine::parse(rest)),
            "encoder" => encoder_line = Some(KvLine::parse(rest)),
            "tensor" => {
                let mut toks = rest.split_whitespace();
                let name = toks
                    .next()
                    .ok_or_else(|| Error::format(path, "tensor line missing name"))?
                    .to_string();
                let shape = toks
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::format(path, "bad tensor shape"))?;
                tensor_decls.push((name, shape));
            }
            "payload_len" => {
                payload_len = Some(
                    rest.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::format(path, "bad payload_len"))?,
                )
            }
            other => {
                return Err(Error::format(
                    path,
                    format!("unknown header line '{other}'"),
                ))
            }
        }
    }

    let sample_rate = sample_rate.ok_or_else(|| Error::format(path, "missing sample_rate"))?;
    let gcn_kv = gcn_line.ok_or_else(|| Error::format(path, "missing gcn line"))?;
    let dilations = dilations.ok_or_else(|| Error::format(path, "missing dilations"))?;
    let cond_text = cond_line.ok_or_else(|| Error::format(path, "missing cond line"))?;
    let mel_kv = mel_line.ok_or_else(|| Error::format(path, "missing mel line"))?;
    let enc_kv = encoder_line.ok_or_else(|| Error::format(path, "missing encoder line"))?;
    let payload_len = payload_len.ok_or_else(|| Error::format(path, "missing payload_len"))?;

    if payload.len() != payload_len {
        return Err(Error::format(
            path,
            format!("payload length {} != declared {payload_len}", payload.len()),
        ));
    }
    let declared: usize = tensor_decls
        .iter()
        .map(|(_, s)| s.iter().product::<usize>() * 4)
        .sum();
    if declared != payload_len {
        return Err(Error::format(
            path,
            format!("tensor shapes sum to {declared} bytes, payload is {payload_len}"),
        ));
    }

    // Rebuild the skeleton from config, then overwrite weights by name.
    let cond_kv = KvLine::parse(&cond_text);
    let cond_kind = cond_text.split_whitespace().next().unwrap_or_default();
    let cond_mode = CondMode::parse(cond_kind)
        .map_err(|_| Error::format(path, format!("unknown cond kind '{cond_kind}'")))?;
    let d_e: usize = cond_kv.get("d_e", path)?;

    let gcn_config = GcnConfig {
        num_blocks: gcn_kv.get("blocks", path)?,
        channels: gcn_kv.get("channels", path)?,
        kernel_size: gcn_kv.get("kernel", path)?,
        skip_channels: gcn_kv.get("skip", path)?,
        dilations,
        cond_mode,
    };
    gcn_config.validate()?;

    let mel = MelConfig {
        fft_size: mel_kv.get("fft", path)?,
        hop: mel_kv.get("hop", path)?,
        mel_bands: mel_kv.get("bands", path)?,
        fmin: mel_kv.get("fmin", path)?,
        fmax: mel_kv.get("fmax", path)?,
        log_floor: mel_kv.get("floor", path)?,
    };
    let encoder_config = EncoderConfig {
        mel,
        hidden: enc_kv.get("hidden", path)?,
        embedding_dim: d_e,
    };
    let frozen: bool = enc_kv.get("frozen", path)?;
    let hyper_hidden: usize = if cond_mode == CondMode::Hypernet {
        cond_kv.get("hidden", path)?
    } else {
        0
    };
    let granularity = if cond_mode == CondMode::Hypernet {
        Granularity::parse(&cond_kv.get::<String>("granularity", path)?)
            .map_err(|_| Error::format(path, "bad granularity"))?
    } else {
        Granularity::PerChannel
    };

    let encoder = EncoderWeights::init(encoder_config, &mut Rng::new(0));
    let mut bundle = ModelBundle::init(gcn_config, granularity, hyper_hidden.max(1), encoder, 0)?;
    bundle.sample_rate = sample_rate;

    // Copy payload into the skeleton tensor by tensor.
    {
        let mut dst: std::collections::BTreeMap<String, &mut [f32]> =
            std::collections::BTreeMap::new();
        let mut gcn_params = bundle.gcn.params_mut();
        for p in gcn_params.iter_mut() {
            let name = p.name().to_string();
            dst.insert(name, p.values_mut());
        }
        let mut cond_params = bundle.cond.params_mut();
        for p in cond_params.iter_mut() {
            let name = p.name().to_string();
            dst.insert(name, p.values_mut());
        }
        let mut enc_params = bundle.encoder.l1.params_mut();
        enc_params.extend(bundle.encoder.l2.params_mut());
        for p in enc_params.into_iter() {
            let name = p.name().to_string();
            dst.insert(name, p.values_mut());
        }
        dst.insert("enc.feat_mean".into(), &mut bundle.encoder.feat_mean);
        dst.insert("enc.feat_std".into(), &mut bundle.encoder.feat_std);

        let mut offset = 0usize;
        for (name, shape) in &tensor_decls {
            let n: usize = shape.iter().product();
            let slot = dst.remove(name.as_str()).ok_or_else(|| {
                Error::format(path, format!("tensor '{name}' does not match this config"))
            })?;
            if slot.len() != n {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor '{name}' declared {n} values, config expects {}",
                        slot.len()
                    ),
                ));
            }
            for (i, v) in slot.iter_mut().enumerate() {
                let o = offset + i * 4;
                *v = f32::from_le_bytes([
                    payload[o],
                    payload[o + 1],
                    payload[o + 2],
                    payload[o + 3],
                ]);
            }
            offset += n * 4;
        }
        if !dst.is_empty() {
            let missing: Vec<&String> = dst.keys().collect();
            return Err(Error::format(
                path,
                format!("file is missing tensors {missing:?}"),
            ));
        }
    }

    if frozen {
        bundle.encoder.freeze();
    }
    Ok(bundle)
}
