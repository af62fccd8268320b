//! toneforge: corpus building, encoder pretraining, generator training,
//! rendering, zero-shot evaluation, benchmarking, and gradient verification
//! from one binary.
//!
//! Exit codes: 0 ok, 2 usage/contract, 3 i/o, 4 format, 5 numeric fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use toneforge::audio::DEFAULT_SAMPLE_RATE;
use toneforge::cond::Granularity;
use toneforge::corpus::{build_corpus, synth_performance, LoadedCorpus, SplitSpec};
use toneforge::encoder::{EncoderConfig, PretrainOptions};
use toneforge::error::{Error, Result};
use toneforge::gcn::{dilation_pattern, CondMode, GcnConfig};
use toneforge::mel::MelConfig;
use toneforge::store::{load_model, save_model, ModelBundle};
use toneforge::stream::{bench_rtf, stream_render};
use toneforge::train::{
    esr, pretrain_encoder_on_corpus, train, zero_shot_eval, MetricsReport, TrainConfig,
};
use toneforge::verify::gradient_battery;
use toneforge::wav::{read_wav, write_wav, SampleDepth};

#[derive(Parser)]
#[command(
    name = "toneforge",
    version,
    about = "Zero-shot guitar amp tone modeling"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic paired corpus (clean performances x amp presets).
    Corpus(CorpusArgs),
    /// Pretrain the tone encoder on a corpus and emit an initialized model.
    TrainEncoder(TrainEncoderArgs),
    /// Train the generator and conditioning network on a corpus.
    Train(TrainArgs),
    /// Render a clean file with the tone of a reference file.
    Render(RenderArgs),
    /// Zero-shot evaluation on the held-out presets of a corpus.
    Eval(EvalArgs),
    /// Measure the streaming real-time factor.
    Bench(BenchArgs),
    /// Finite-difference verification of every gradient path.
    Gradcheck(GradcheckArgs),
}

/// Optional `key value` overrides applied where a flag was not given.
#[derive(Args, Debug, Default)]
struct ConfigFile {
    /// Structured-text config: one `key value` pair per line, keys named
    /// after long flags; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

struct Overrides(std::collections::BTreeMap<String, String>);

impl Overrides {
    fn load(path: Option<&Path>) -> Result<Overrides> {
        let mut map = std::collections::BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once(char::is_whitespace)
                    .or_else(|| line.split_once('='))
                    .ok_or_else(|| {
                        Error::format(p, format!("line {}: expected 'key value'", ln + 1))
                    })?;
                map.insert(
                    k.trim().replace('-', "_"),
                    v.trim().trim_start_matches('=').trim().to_string(),
                );
            }
        }
        Ok(Overrides(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str, cli: Option<T>, default: T) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Contract(format!("config value '{raw}' invalid for '{key}'"))),
            None => Ok(default),
        }
    }
}

#[derive(Args)]
struct CorpusArgs {
    /// Output directory for WAVs and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Total number of sampled presets.
    #[arg(long)]
    presets: Option<usize>,
    /// How many of the presets are held out as unseen tones.
    #[arg(long)]
    heldout_tones: Option<usize>,
    /// Synthetic performances to generate (ignored when --clean is given).
    #[arg(long)]
    performances: Option<usize>,
    /// How many performances are held out as unseen content.
    #[arg(long)]
    heldout_performances: Option<usize>,
    /// Length of each synthetic performance, seconds.
    #[arg(long)]
    duration_s: Option<f64>,
    /// Use these clean WAV files as performances instead of synthesizing.
    #[arg(long)]
    clean: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct TrainEncoderArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output model file (initialized generator + pretrained frozen encoder).
    #[arg(long)]
    out: PathBuf,
    /// Conditioning mechanism: hypernet, film, or none.
    #[arg(long)]
    cond: Option<String>,
    /// Hypernet delta granularity: per_channel or full.
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    skip: Option<usize>,
    /// Dilation cycle length (dilations are 2^(i mod cycle)).
    #[arg(long)]
    cycle: Option<usize>,
    #[arg(long)]
    d_e: Option<usize>,
    #[arg(long)]
    hyper_hidden: Option<usize>,
    #[arg(long)]
    enc_hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Input model (from train-encoder or a previous train).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    esr_weight: Option<f64>,
    #[arg(long)]
    mae_weight: Option<f64>,
    #[arg(long)]
    pre_emphasis: Option<f64>,
    #[arg(long)]
    reference_seconds: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    /// Clean input WAV.
    #[arg(long)]
    input: PathBuf,
    /// Reference WAV carrying the target tone (>= 0.5 s).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the block-based streaming engine instead of the offline forward.
    #[arg(long)]
    streaming: bool,
    #[arg(long)]
    block: Option<usize>,
    /// Ground-truth wet WAV; when given, the ESR against it is printed.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output sample depth: float32 or pcm16.
    #[arg(long)]
    depth: Option<String>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Second model evaluated on the identical corpus for comparison.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Write the full report(s) to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct BenchArgs {
    /// Model file to bench; omit for a seeded synthetic desk-scale model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFile,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random configurations per case family.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigFile,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Corpus(a) => cmd_corpus(a),
        Cmd::TrainEncoder(a) => cmd_train_encoder(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_corpus(a: CorpusArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let n_presets = ov.get("presets", a.presets, 72)?;
    let heldout_tones = ov.get("heldout_tones", a.heldout_tones, 8)?;
    let n_perf = ov.get("performances", a.performances, 6)?;
    let heldout_perf = ov.get("heldout_performances", a.heldout_performances, 2)?;
    let duration = ov.get("duration_s", a.duration_s, 4.0)?;
    let seed = ov.get("seed", a.seed, 0)?;

    let rng = toneforge::rng::Rng::new(seed);
    let presets = toneforge::amp::sample_presets(n_presets, rng.derive_seed(1));
    let clean: Vec<toneforge::audio::AudioBuffer> = if a.clean.is_empty() {
        (0..n_perf)
            .map(|i| {
                synth_performance(
                    rng.derive_seed(1000 + i as u64),
                    duration,
                    DEFAULT_SAMPLE_RATE,
                )
            })
            .collect::<Result<_>>()?
    } else {
        a.clean
            .iter()
            .map(|p| read_wav(p, DEFAULT_SAMPLE_RATE))
            .collect::<Result<_>>()?
    };

    let manifest = build_corpus(
        &clean,
        &presets,
        SplitSpec {
            heldout_presets: heldout_tones,
            heldout_contents: heldout_perf,
        },
        seed,
        &a.out,
    )?;
    println!(
        "corpus: {} presets ({} held out), {} performances ({} held out), {} entries -> {}",
        manifest.presets.len(),
        heldout_tones,
        manifest.contents.len(),
        heldout_perf,
        manifest.entries.len(),
        a.out.join("manifest.txt").display()
    );
    Ok(())
}

fn cmd_train_encoder(a: TrainEncoderArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let cond = CondMode::parse(&ov.get("cond", a.cond.clone(), "hypernet".into())?)?;
    let granularity =
        Granularity::parse(&ov.get("granularity", a.granularity.clone(), "per_channel".into())?)?;
    let blocks = ov.get("blocks", a.blocks, 10)?;
    let channels = ov.get("channels", a.channels, 16)?;
    let kernel = ov.get("kernel", a.kernel, 3)?;
    let skip = ov.get("skip", a.skip, 16)?;
    let cycle = ov.get("cycle", a.cycle, 10)?;
    let d_e = ov.get("d_e", a.d_e, 64)?;
    let hyper_hidden = ov.get("hyper_hidden", a.hyper_hidden, 32)?;
    let enc_hidden = ov.get("enc_hidden", a.enc_hidden, 128)?;
    let epochs = ov.get("epochs", a.epochs, 200)?;
    let lr = ov.get("lr", a.lr, 1e-3)?;
    let seed = ov.get("seed", a.seed, 0)?;

    let corpus = LoadedCorpus::load(&a.corpus)?;
    let enc_config = EncoderConfig {
        mel: MelConfig::default(),
        hidden: enc_hidden,
        embedding_dim: d_e,
    };
    let opts = PretrainOptions {
        epochs,
        lr,
        seed,
        ..Default::default()
    };
    let (encoder, report) = pretrain_encoder_on_corpus(&corpus, enc_config, &opts)?;
    println!(
        "encoder: {} presets, {} train clips, {} held-out clips, held-out accuracy {:.3}",
        report.n_presets, report.n_train, report.n_heldout, report.heldout_accuracy
    );

    let gcn_config = GcnConfig {
        num_blocks: blocks,
        channels,
        kernel_size: kernel,
        skip_channels: skip,
        dilations: dilation_pattern(blocks, cycle),
        cond_mode: cond,
    };
    let bundle = ModelBundle::init(gcn_config, granularity, hyper_hidden, encoder, seed)?;
    save_model(&a.out, &bundle)?;
    println!(
        "model initialized: {} -> {}",
        bundle.config_digest(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let cfg = TrainConfig {
        steps: ov.get("steps", a.steps, 5000)?,
        batch_size: ov.get("batch", a.batch, 1)?,
        segment_len: ov.get("segment", a.segment, 32_768)?,
        lr: ov.get("lr", a.lr, 2e-3)?,
        esr_weight: ov.get("esr_weight", a.esr_weight, 1.0)?,
        mae_weight: ov.get("mae_weight", a.mae_weight, 0.5)?,
        pre_emphasis: ov.get("pre_emphasis", a.pre_emphasis, 0.95)?,
        reference_seconds: ov.get("reference_seconds", a.reference_seconds, 1.0)?,
        seed: ov.get("seed", a.seed, 0)?,
        log_every: ov.get("log_every", a.log_every, 200)?,
        checkpoint_every: ov.get("checkpoint_every", a.checkpoint_every, 0)?,
    };
    let corpus = LoadedCorpus::load(&a.corpus)?;
    let mut bundle = load_model(&a.model)?;
    let report = train(&corpus, &mut bundle, &cfg, a.checkpoint_dir.as_deref())?;
    save_model(&a.out, &bundle)?;
    println!(
        "trained {} steps in {:.1} s: loss {:.6} -> {:.6} ({})",
        report.steps,
        report.wall_s,
        report.initial_loss,
        report.final_loss,
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let block = ov.get("block", a.block, 128)?;
    let depth = match ov.get("depth", a.depth.clone(), "float32".into())?.as_str() {
        "float32" => SampleDepth::Float32,
        "pcm16" => SampleDepth::Pcm16,
        other => return Err(Error::Contract(format!("unknown depth '{other}'"))),
    };

    let bundle = load_model(&a.model)?;
    let clean = read_wav(&a.input, bundle.sample_rate)?;
    let reference = read_wav(&a.reference, bundle.sample_rate)?;
    let phi = bundle.encode_reference(&reference)?;
    println!("tone fingerprint {:016x}", phi.fingerprint());

    let rendered = if a.streaming {
        stream_render(&bundle, Some(&phi), &clean, block)?
    } else {
        let y = bundle.forward_offline(clean.samples(), Some(&phi))?;
        toneforge::audio::AudioBuffer::new(y, clean.sample_rate())?
    };

    if let Some(target_path) = &a.target {
        let target = read_wav(target_path, bundle.sample_rate)?;
        if target.len() == rendered.len() {
            let e = esr(target.samples(), rendered.samples())?;
            println!("esr vs target: {e:.6}");
        } else {
            let n = target.len().min(rendered.len());
            let e = esr(&target.samples()[..n], &rendered.samples()[..n])?;
            println!("esr vs target (first {n} samples): {e:.6}");
        }
    }

    write_wav(&a.out, &rendered, depth)?;
    println!(
        "rendered {} samples ({}) -> {}",
        rendered.len(),
        if a.streaming { "streaming" } else { "offline" },
        a.out.display()
    );
    Ok(())
}

fn eval_one(model_path: &Path, corpus: &LoadedCorpus) -> Result<MetricsReport> {
    let bundle = load_model(model_path)?;
    zero_shot_eval(&bundle, corpus)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let corpus = LoadedCorpus::load(&a.corpus)?;
    let main = eval_one(&a.model, &corpus)?;
    let compare = a
        .compare
        .as_deref()
        .map(|p| eval_one(p, &corpus))
        .transpose()?;

    let mut text = String::new();
    {
        use std::fmt::Write as _;
        let _ = writeln!(
            text,
            "{:<44} {:>10} {:>10} {:>12} {:>14} {:>10}",
            "model", "esr", "mae", "identity", "mean_emb", "beats_id"
        );
        let mut row = |r: &MetricsReport| {
            let _ = writeln!(
                text,
                "{:<44} {:>10.6} {:>10.6} {:>12.6} {:>14.6} {:>7}/{}",
                r.model,
                r.aggregate_esr,
                r.aggregate_mae,
                r.aggregate_identity_esr,
                r.aggregate_mean_embedding_esr,
                r.beats_identity,
                r.rows.len()
            );
        };
        row(&main);
        if let Some(c) = &compare {
            row(c);
        }
    }
    println!("{text}");
    println!("per-preset ({}):\n{}", main.model, main.to_table());
    if let Some(c) = &compare {
        println!("per-preset ({}):\n{}", c.model, c.to_table());
    }

    if let Some(out) = &a.out {
        let mut report = main.to_text();
        if let Some(c) = &compare {
            report.push('\n');
            report.push_str(&c.to_text());
        }
        std::fs::write(out, report).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let duration = ov.get("duration", a.duration, 10.0)?;
    let block = ov.get("block", a.block, 128)?;
    let seed = ov.get("seed", a.seed, 0)?;

    let (bundle, phi) = match &a.model {
        Some(p) => {
            let bundle = load_model(p)?;
            let mut rng = toneforge::rng::Rng::new(seed);
            let phi = toneforge::cond::ToneEmbedding::new(
                (0..bundle.embedding_dim())
                    .map(|_| rng.normal() as f32)
                    .collect(),
                None,
            )?;
            (bundle, phi)
        }
        None => {
            // Synthetic desk-scale model.
            let enc = toneforge::encoder::EncoderWeights::init(
                EncoderConfig::default(),
                &mut toneforge::rng::Rng::new(seed),
            );
            let bundle = ModelBundle::init(
                GcnConfig::desk(CondMode::Hypernet),
                Granularity::PerChannel,
                32,
                enc,
                seed,
            )?;
            let mut rng = toneforge::rng::Rng::new(seed + 1);
            let phi = toneforge::cond::ToneEmbedding::new(
                (0..bundle.embedding_dim())
                    .map(|_| rng.normal() as f32)
                    .collect(),
                None,
            )?;
            (bundle, phi)
        }
    };

    let report = bench_rtf(&bundle, Some(&phi), duration, block)?;
    println!(
        "rtf {:.4} ({} samples, block {}, wall {:.3} s, worst block {:.3} ms, rf {})",
        report.rtf,
        report.samples_processed,
        report.block_size,
        report.wall_s,
        report.worst_block_s * 1e3,
        report.receptive_field
    );
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_text()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let ov = Overrides::load(a.cfg.config.as_deref())?;
    let n = ov.get("seeds", a.seeds, 10)?;
    let seed = ov.get("seed", a.seed, 0)?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
    let summary = gradient_battery(&seeds)?;
    print!("{}", summary.to_text());
    if summary.passed() {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}
