//! The generator: a stack of dilated gated convolution blocks with residual
//! and skip connections, a 1x1 input projection, and a 1x1 output head over
//! the ReLU'd skip sum.
//!
//! Offline rendering and the streaming engine run the same block kernel
//! (`process_block_with_state`); offline is simply one big block starting
//! from zeroed history, which makes streaming-vs-offline agreement a
//! structural property rather than a numerical one.

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::nn::act::{gated_forward_cached, relu_backward, relu_inplace};
use crate::nn::conv::{conv_ctx_backward, conv_ctx_forward, left_context};
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How the generator consumes a tone embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    None,
    Film,
    Hypernet,
}

impl CondMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CondMode::None => "none",
            CondMode::Film => "film",
            CondMode::Hypernet => "hypernet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CondMode::None),
            "film" => Ok(CondMode::Film),
            "hypernet" => Ok(CondMode::Hypernet),
            other => Err(Error::Contract(format!("unknown cond mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcnConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub skip_channels: usize,
    /// One dilation per block.
    pub dilations: Vec<usize>,
    pub cond_mode: CondMode,
}

/// Default dilation pattern: 2^(i mod cycle).
pub fn dilation_pattern(num_blocks: usize, cycle: usize) -> Vec<usize> {
    (0..num_blocks).map(|i| 1usize << (i % cycle)).collect()
}

impl GcnConfig {
    /// Desk-scale default: 10 blocks, 16 channels, kernel 3, dilations 1..512.
    pub fn desk(cond_mode: CondMode) -> Self {
        GcnConfig {
            num_blocks: 10,
            channels: 16,
            kernel_size: 3,
            skip_channels: 16,
            dilations: dilation_pattern(10, 10),
            cond_mode,
        }
    }

    /// Paper-scale depth: 20 blocks (two dilation cycles).
    pub fn paper_scale(cond_mode: CondMode) -> Self {
        GcnConfig {
            num_blocks: 20,
            channels: 16,
            kernel_size: 3,
            skip_channels: 16,
            dilations: dilation_pattern(20, 10),
            cond_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Contract("num_blocks must be >= 1".into()));
        }
        if self.kernel_size < 2 {
            return Err(Error::Contract("kernel_size must be >= 2".into()));
        }
        if self.channels < 1 || self.skip_channels < 1 {
            return Err(Error::Contract("channel counts must be >= 1".into()));
        }
        if self.dilations.len() != self.num_blocks {
            return Err(Error::Contract(format!(
                "dilation list length {} != num_blocks {}",
                self.dilations.len(),
                self.num_blocks
            )));
        }
        if self.dilations.iter().any(|&d| d < 1) {
            return Err(Error::Contract("dilations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Past samples that influence one output sample:
/// 1 + sum over blocks of (kernel - 1) * dilation. The 1x1 input projection
/// and output head add nothing.
pub fn receptive_field(config: &GcnConfig) -> usize {
    1 + config
        .dilations
        .iter()
        .map(|&d| (config.kernel_size - 1) * d)
        .sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Dilated,
    Residual,
    Skip,
}

impl LayerRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerRole::Dilated => "dilated",
            LayerRole::Residual => "residual",
            LayerRole::Skip => "skip",
        }
    }
}

/// One conditionable convolution layer of the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub block: usize,
    pub role: LayerRole,
    /// [c_out, c_in, k]
    pub w_shape: [usize; 3],
    pub b_len: usize,
}

#[derive(Debug, Clone)]
pub struct GcnBlock<S: Scalar> {
    pub dilation: usize,
    pub dilated_w: ParamTensor<S>,
    pub dilated_b: ParamTensor<S>,
    pub residual_w: ParamTensor<S>,
    pub residual_b: ParamTensor<S>,
    pub skip_w: ParamTensor<S>,
    pub skip_b: ParamTensor<S>,
}

#[derive(Debug, Clone)]
pub struct GcnModel<S: Scalar> {
    pub config: GcnConfig,
    pub input_w: ParamTensor<S>,
    pub input_b: ParamTensor<S>,
    pub blocks: Vec<GcnBlock<S>>,
    pub head_w: ParamTensor<S>,
    pub head_b: ParamTensor<S>,
}

impl<S: Scalar> GcnModel<S> {
    /// Kaiming-uniform weights, zero biases.
    pub fn init(config: GcnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let cs = config.skip_channels;
        let k = config.kernel_size;
        let blocks = config
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| GcnBlock {
                dilation: d,
                dilated_w: ParamTensor::kaiming_uniform(
                    format!("gcn.block{i}.dilated.w"),
                    &[2 * c, c, k],
                    c * k,
                    rng,
                ),
                dilated_b: ParamTensor::zeros(format!("gcn.block{i}.dilated.b"), &[2 * c]),
                residual_w: ParamTensor::kaiming_uniform(
                    format!("gcn.block{i}.residual.w"),
                    &[c, c, 1],
                    c,
                    rng,
                ),
                residual_b: ParamTensor::zeros(format!("gcn.block{i}.residual.b"), &[c]),
                skip_w: ParamTensor::kaiming_uniform(
                    format!("gcn.block{i}.skip.w"),
                    &[cs, c, 1],
                    c,
                    rng,
                ),
                skip_b: ParamTensor::zeros(format!("gcn.block{i}.skip.b"), &[cs]),
            })
            .collect();
        Ok(GcnModel {
            input_w: ParamTensor::kaiming_uniform("gcn.input.w", &[c, 1, 1], 1, rng),
            input_b: ParamTensor::zeros("gcn.input.b", &[c]),
            blocks,
            head_w: ParamTensor::kaiming_uniform("gcn.head.w", &[1, cs, 1], cs, rng),
            head_b: ParamTensor::zeros("gcn.head.b", &[1]),
            config,
        })
    }

    /// Conditionable layers in stable order: block-major, dilated then
    /// residual then skip. Input projection and output head are excluded.
    pub fn enumerate_cond_layers(&self) -> Vec<LayerDescriptor> {
        let c = self.config.channels;
        let cs = self.config.skip_channels;
        let k = self.config.kernel_size;
        let mut out = Vec::with_capacity(3 * self.config.num_blocks);
        for block in 0..self.config.num_blocks {
            out.push(LayerDescriptor {
                block,
                role: LayerRole::Dilated,
                w_shape: [2 * c, c, k],
                b_len: 2 * c,
            });
            out.push(LayerDescriptor {
                block,
                role: LayerRole::Residual,
                w_shape: [c, c, 1],
                b_len: c,
            });
            out.push(LayerDescriptor {
                block,
                role: LayerRole::Skip,
                w_shape: [cs, c, 1],
                b_len: cs,
            });
        }
        out
    }

    /// (w, b) of the conditionable layer at `idx` in enumeration order.
    pub fn cond_layer(&self, idx: usize) -> (&ParamTensor<S>, &ParamTensor<S>) {
        let block = &self.blocks[idx / 3];
        match idx % 3 {
            0 => (&block.dilated_w, &block.dilated_b),
            1 => (&block.residual_w, &block.residual_b),
            _ => (&block.skip_w, &block.skip_b),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = vec![&mut self.input_w, &mut self.input_b];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.dilated_w);
            out.push(&mut b.dilated_b);
            out.push(&mut b.residual_w);
            out.push(&mut b.residual_b);
            out.push(&mut b.skip_w);
            out.push(&mut b.skip_b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<S>> {
        let mut out: Vec<&ParamTensor<S>> = vec![&self.input_w, &self.input_b];
        for b in self.blocks.iter() {
            out.push(&b.dilated_w);
            out.push(&b.dilated_b);
            out.push(&b.residual_w);
            out.push(&b.residual_b);
            out.push(&b.skip_w);
            out.push(&b.skip_b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }
}

/// Borrowed (w, b) slices for one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerW<'a, S> {
    pub w: &'a [S],
    pub b: &'a [S],
}

#[derive(Debug, Clone, Copy)]
pub struct BlockW<'a, S> {
    pub dilated: LayerW<'a, S>,
    pub residual: LayerW<'a, S>,
    pub skip: LayerW<'a, S>,
}

/// Anything that can lend the generator's weights: the model itself (base
/// weights) or a baked set (hypernet-modulated). Accessors return borrowed
/// slices, so forward passes never copy or allocate weight storage.
pub trait WeightSource<S: Scalar> {
    fn input_layer(&self) -> LayerW<'_, S>;
    fn block_layers(&self, i: usize) -> BlockW<'_, S>;
    fn head_layer(&self) -> LayerW<'_, S>;
}

impl<S: Scalar> WeightSource<S> for GcnModel<S> {
    fn input_layer(&self) -> LayerW<'_, S> {
        LayerW {
            w: self.input_w.values(),
            b: self.input_b.values(),
        }
    }

    fn block_layers(&self, i: usize) -> BlockW<'_, S> {
        let b = &self.blocks[i];
        BlockW {
            dilated: LayerW {
                w: b.dilated_w.values(),
                b: b.dilated_b.values(),
            },
            residual: LayerW {
                w: b.residual_w.values(),
                b: b.residual_b.values(),
            },
            skip: LayerW {
                w: b.skip_w.values(),
                b: b.skip_b.values(),
            },
        }
    }

    fn head_layer(&self) -> LayerW<'_, S> {
        LayerW {
            w: self.head_w.values(),
            b: self.head_b.values(),
        }
    }
}

/// Per-block FiLM parameters (gamma, beta), applied per channel to the gated
/// activation output, broadcast over time.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams<S> {
    pub per_block: Vec<(Vec<S>, Vec<S>)>,
}

/// h' = gamma * h + beta, per channel over time.
pub fn apply_film<S: Scalar>(h: &mut [S], gamma: &[S], beta: &[S], t_len: usize) {
    for (c, row) in h.chunks_exact_mut(t_len).enumerate() {
        let (g, b) = (gamma[c], beta[c]);
        for v in row.iter_mut() {
            *v = g * *v + b;
        }
    }
}

/// Per-layer input history plus scratch buffers for block processing.
/// All buffers are allocated once for a maximum block length; processing
/// never allocates.
#[derive(Debug, Clone)]
pub struct GcnState<S: Scalar> {
    channels: usize,
    skip_channels: usize,
    block_cap: usize,
    /// Per block: the last (k-1)*d input columns of its dilated conv, [C, ctx].
    hist: Vec<Vec<S>>,
    ctx: Vec<usize>,
    ext: Vec<S>,
    cur: Vec<S>,
    nxt: Vec<S>,
    z: Vec<S>,
    h: Vec<S>,
    skip_sum: Vec<S>,
    skip_tmp: Vec<S>,
}

impl<S: Scalar> GcnState<S> {
    pub fn new(config: &GcnConfig, block_cap: usize) -> Self {
        let c = config.channels;
        let cs = config.skip_channels;
        let ctx: Vec<usize> = config
            .dilations
            .iter()
            .map(|&d| left_context(config.kernel_size, d))
            .collect();
        let max_ctx = ctx.iter().copied().max().unwrap_or(0);
        GcnState {
            channels: c,
            skip_channels: cs,
            block_cap,
            hist: ctx.iter().map(|&x| vec![S::ZERO; c * x]).collect(),
            ctx,
            ext: vec![S::ZERO; c * (max_ctx + block_cap)],
            cur: vec![S::ZERO; c * block_cap],
            nxt: vec![S::ZERO; c * block_cap],
            z: vec![S::ZERO; 2 * c * block_cap],
            h: vec![S::ZERO; c * block_cap],
            skip_sum: vec![S::ZERO; cs * block_cap],
            skip_tmp: vec![S::ZERO; cs * block_cap],
        }
    }

    pub fn block_cap(&self) -> usize {
        self.block_cap
    }

    /// History ring capacity per block, in samples: (k-1)*d.
    pub fn ring_capacities(&self) -> &[usize] {
        &self.ctx
    }

    /// One block's retained input history, [channels, ctx].
    pub fn history(&self, block: usize) -> &[S] {
        &self.hist[block]
    }

    /// Zero all history, equivalent to a fresh stream.
    pub fn reset(&mut self) {
        for h in self.hist.iter_mut() {
            h.iter_mut().for_each(|v| *v = S::ZERO);
        }
    }
}

/// Process `input` (length <= state.block_cap) through the generator,
/// advancing per-layer history. Writes `input.len()` samples to `output`.
///
/// Performs no allocation; all work happens in `state` scratch.
pub fn process_block_with_state<S: Scalar, W: WeightSource<S> + ?Sized>(
    weights: &W,
    config: &GcnConfig,
    film: Option<&FilmParams<S>>,
    state: &mut GcnState<S>,
    input: &[S],
    output: &mut [S],
) {
    let t = input.len();
    debug_assert!(t <= state.block_cap);
    debug_assert_eq!(output.len(), t);
    if t == 0 {
        return;
    }
    let c = state.channels;
    let cs = state.skip_channels;
    let k = config.kernel_size;

    // Input projection (1x1, no history needed).
    let input_layer = weights.input_layer();
    conv_ctx_forward(
        &mut state.cur[..c * t],
        input,
        input_layer.w,
        input_layer.b,
        c,
        1,
        1,
        1,
        t,
    );

    state.skip_sum[..cs * t]
        .iter_mut()
        .for_each(|v| *v = S::ZERO);

    for bi in 0..config.num_blocks {
        let bw = weights.block_layers(bi);
        let d = config.dilations[bi];
        let ctx = state.ctx[bi];
        let ext_cols = ctx + t;

        // ext = [history | current block], then history <- last ctx columns.
        for ch in 0..c {
            let ext_row = &mut state.ext[ch * ext_cols..(ch + 1) * ext_cols];
            ext_row[..ctx].copy_from_slice(&state.hist[bi][ch * ctx..(ch + 1) * ctx]);
            ext_row[ctx..].copy_from_slice(&state.cur[ch * t..ch * t + t]);
        }
        for ch in 0..c {
            let ext_row = &state.ext[ch * ext_cols..(ch + 1) * ext_cols];
            state.hist[bi][ch * ctx..(ch + 1) * ctx].copy_from_slice(&ext_row[t..t + ctx]);
        }

        conv_ctx_forward(
            &mut state.z[..2 * c * t],
            &state.ext[..c * ext_cols],
            bw.dilated.w,
            bw.dilated.b,
            2 * c,
            c,
            k,
            d,
            t,
        );

        {
            let (zf, zg) = state.z.split_at(c * t);
            for i in 0..c * t {
                state.h[i] = zf[i].tanh() * zg[i].sigmoid();
            }
        }

        if let Some(fp) = film {
            let (gamma, beta) = &fp.per_block[bi];
            apply_film(&mut state.h[..c * t], gamma, beta, t);
        }

        conv_ctx_forward(
            &mut state.skip_tmp[..cs * t],
            &state.h[..c * t],
            bw.skip.w,
            bw.skip.b,
            cs,
            c,
            1,
            1,
            t,
        );
        for i in 0..cs * t {
            state.skip_sum[i] += state.skip_tmp[i];
        }

        conv_ctx_forward(
            &mut state.nxt[..c * t],
            &state.h[..c * t],
            bw.residual.w,
            bw.residual.b,
            c,
            c,
            1,
            1,
            t,
        );
        for i in 0..c * t {
            state.nxt[i] += state.cur[i];
        }
        std::mem::swap(&mut state.cur, &mut state.nxt);
    }

    relu_inplace(&mut state.skip_sum[..cs * t]);
    let head = weights.head_layer();
    conv_ctx_forward(
        output,
        &state.skip_sum[..cs * t],
        head.w,
        head.b,
        1,
        cs,
        1,
        1,
        t,
    );
}

fn check_condition<S: Scalar>(config: &GcnConfig, film: Option<&FilmParams<S>>) -> Result<()> {
    match (config.cond_mode, film.is_some()) {
        (CondMode::Film, false) => Err(Error::Contract(
            "film-conditioned model requires film parameters".into(),
        )),
        (CondMode::None, true) => Err(Error::Contract(
            "unconditioned model received film parameters".into(),
        )),
        _ => Ok(()),
    }
}

/// Offline forward over a whole buffer: one block from zeroed history.
pub fn gcn_forward_weights<S: Scalar, W: WeightSource<S> + ?Sized>(
    weights: &W,
    config: &GcnConfig,
    film: Option<&FilmParams<S>>,
    x: &[S],
) -> Result<Vec<S>> {
    check_condition(config, film)?;
    if let Some(fp) = film {
        if fp.per_block.len() != config.num_blocks {
            return Err(Error::Contract(format!(
                "film parameter count {} != num_blocks {}",
                fp.per_block.len(),
                config.num_blocks
            )));
        }
    }
    let mut out = vec![S::ZERO; x.len()];
    if x.is_empty() {
        return Ok(out);
    }
    let mut state = GcnState::new(config, x.len());
    process_block_with_state(weights, config, film, &mut state, x, &mut out);
    Ok(out)
}

/// Offline forward for an unconditioned or film-conditioned model over audio.
/// Hypernet conditioning goes through `cond::bake` first.
pub fn gcn_forward<S: Scalar>(
    model: &GcnModel<S>,
    film: Option<&FilmParams<S>>,
    x: &[S],
) -> Result<Vec<S>> {
    gcn_forward_weights(model, &model.config, film, x)
}

/// Convenience wrapper over [`AudioBuffer`] for f32 models.
pub fn gcn_render(
    model: &GcnModel<f32>,
    film: Option<&FilmParams<f32>>,
    x: &AudioBuffer,
) -> Result<AudioBuffer> {
    let y = gcn_forward(model, film, x.samples())?;
    if let Some(idx) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite generator output at sample {idx}"
        )));
    }
    AudioBuffer::new(y, x.sample_rate())
}

// ---------------------------------------------------------------------------
// Training path: forward with caches, full backward.
// ---------------------------------------------------------------------------

/// Activations retained for the backward pass.
pub struct ForwardCache<S: Scalar> {
    pub t_len: usize,
    input: Vec<S>,
    block_ext: Vec<Vec<S>>,
    tanh_vals: Vec<Vec<S>>,
    sig_vals: Vec<Vec<S>>,
    h_gated: Vec<Vec<S>>,
    h_final: Vec<Vec<S>>,
    skip_pre: Vec<S>,
    pub output: Vec<S>,
}

/// Gradients with respect to every weight array in a `GcnWeights` view,
/// plus FiLM parameter gradients when FiLM is active.
pub struct GcnGrads<S: Scalar> {
    pub input_w: Vec<S>,
    pub input_b: Vec<S>,
    pub blocks: Vec<BlockGrads<S>>,
    pub head_w: Vec<S>,
    pub head_b: Vec<S>,
    pub film: Option<Vec<(Vec<S>, Vec<S>)>>,
}

pub struct BlockGrads<S: Scalar> {
    pub dilated_w: Vec<S>,
    pub dilated_b: Vec<S>,
    pub residual_w: Vec<S>,
    pub residual_b: Vec<S>,
    pub skip_w: Vec<S>,
    pub skip_b: Vec<S>,
}

impl<S: Scalar> GcnGrads<S> {
    pub fn zeros(config: &GcnConfig, with_film: bool) -> Self {
        let c = config.channels;
        let cs = config.skip_channels;
        let k = config.kernel_size;
        GcnGrads {
            input_w: vec![S::ZERO; c],
            input_b: vec![S::ZERO; c],
            blocks: (0..config.num_blocks)
                .map(|_| BlockGrads {
                    dilated_w: vec![S::ZERO; 2 * c * c * k],
                    dilated_b: vec![S::ZERO; 2 * c],
                    residual_w: vec![S::ZERO; c * c],
                    residual_b: vec![S::ZERO; c],
                    skip_w: vec![S::ZERO; cs * c],
                    skip_b: vec![S::ZERO; cs],
                })
                .collect(),
            head_w: vec![S::ZERO; cs],
            head_b: vec![S::ZERO; 1],
            film: if with_film {
                Some(
                    (0..config.num_blocks)
                        .map(|_| (vec![S::ZERO; c], vec![S::ZERO; c]))
                        .collect(),
                )
            } else {
                None
            },
        }
    }
}

/// Forward pass retaining intermediate activations.
pub fn forward_train<S: Scalar, W: WeightSource<S> + ?Sized>(
    weights: &W,
    config: &GcnConfig,
    film: Option<&FilmParams<S>>,
    x: &[S],
) -> Result<ForwardCache<S>> {
    check_condition(config, film)?;
    let t = x.len();
    if t == 0 {
        return Err(Error::Contract("training forward requires t >= 1".into()));
    }
    let c = config.channels;
    let cs = config.skip_channels;
    let k = config.kernel_size;

    let mut cur = vec![S::ZERO; c * t];
    let input_layer = weights.input_layer();
    conv_ctx_forward(&mut cur, x, input_layer.w, input_layer.b, c, 1, 1, 1, t);

    let mut cache = ForwardCache {
        t_len: t,
        input: x.to_vec(),
        block_ext: Vec::with_capacity(config.num_blocks),
        tanh_vals: Vec::with_capacity(config.num_blocks),
        sig_vals: Vec::with_capacity(config.num_blocks),
        h_gated: Vec::with_capacity(config.num_blocks),
        h_final: Vec::with_capacity(config.num_blocks),
        skip_pre: vec![S::ZERO; cs * t],
        output: vec![S::ZERO; t],
    };

    let mut z = vec![S::ZERO; 2 * c * t];
    let mut skip_tmp = vec![S::ZERO; cs * t];
    for bi in 0..config.num_blocks {
        let bw = weights.block_layers(bi);
        let d = config.dilations[bi];
        let ctx = left_context(k, d);
        let ext_cols = ctx + t;
        let mut ext = vec![S::ZERO; c * ext_cols];
        for ch in 0..c {
            ext[ch * ext_cols + ctx..(ch + 1) * ext_cols]
                .copy_from_slice(&cur[ch * t..(ch + 1) * t]);
        }
        conv_ctx_forward(&mut z, &ext, bw.dilated.w, bw.dilated.b, 2 * c, c, k, d, t);

        let mut tanh_vals = vec![S::ZERO; c * t];
        let mut sig_vals = vec![S::ZERO; c * t];
        let mut h = vec![S::ZERO; c * t];
        {
            let (zf, zg) = z.split_at(c * t);
            gated_forward_cached(zf, zg, &mut tanh_vals, &mut sig_vals, &mut h);
        }
        let h_gated = h.clone();
        if let Some(fp) = film {
            let (gamma, beta) = &fp.per_block[bi];
            apply_film(&mut h, gamma, beta, t);
        }

        conv_ctx_forward(&mut skip_tmp, &h, bw.skip.w, bw.skip.b, cs, c, 1, 1, t);
        for i in 0..cs * t {
            cache.skip_pre[i] += skip_tmp[i];
        }

        let mut nxt = vec![S::ZERO; c * t];
        conv_ctx_forward(&mut nxt, &h, bw.residual.w, bw.residual.b, c, c, 1, 1, t);
        for i in 0..c * t {
            nxt[i] += cur[i];
        }

        cache.block_ext.push(ext);
        cache.tanh_vals.push(tanh_vals);
        cache.sig_vals.push(sig_vals);
        cache.h_gated.push(h_gated);
        cache.h_final.push(h);
        cur = nxt;
    }

    let mut relu_out = cache.skip_pre.clone();
    relu_inplace(&mut relu_out);
    let head = weights.head_layer();
    conv_ctx_forward(&mut cache.output, &relu_out, head.w, head.b, 1, cs, 1, 1, t);
    Ok(cache)
}

/// Backward pass: fills `grads` (accumulating) from the upstream gradient on
/// the output sequence.
pub fn backward_train<S: Scalar, W: WeightSource<S> + ?Sized>(
    weights: &W,
    config: &GcnConfig,
    film: Option<&FilmParams<S>>,
    cache: &ForwardCache<S>,
    d_output: &[S],
    grads: &mut GcnGrads<S>,
) {
    let t = cache.t_len;
    debug_assert_eq!(d_output.len(), t);
    let c = config.channels;
    let cs = config.skip_channels;
    let k = config.kernel_size;

    // Head: upstream through the 1x1 conv onto the ReLU'd skip sum.
    let mut relu_out = cache.skip_pre.clone();
    relu_inplace(&mut relu_out);
    let mut d_relu = vec![S::ZERO; cs * t];
    conv_ctx_backward(
        &mut d_relu,
        &mut grads.head_w,
        &mut grads.head_b,
        &relu_out,
        weights.head_layer().w,
        d_output,
        1,
        cs,
        1,
        1,
        t,
    );
    let mut d_skip_sum = vec![S::ZERO; cs * t];
    relu_backward(&cache.skip_pre, &d_relu, &mut d_skip_sum);

    let mut d_cur = vec![S::ZERO; c * t];
    let mut d_h = vec![S::ZERO; c * t];
    let mut d_z = vec![S::ZERO; 2 * c * t];

    for bi in (0..config.num_blocks).rev() {
        let bw = weights.block_layers(bi);
        let bg = &mut grads.blocks[bi];
        let d = config.dilations[bi];
        let ctx = left_context(k, d);
        let ext_cols = ctx + t;

        d_h.iter_mut().for_each(|v| *v = S::ZERO);
        // Skip branch: every block sees the same summed-skip gradient.
        conv_ctx_backward(
            &mut d_h,
            &mut bg.skip_w,
            &mut bg.skip_b,
            &cache.h_final[bi],
            bw.skip.w,
            &d_skip_sum,
            cs,
            c,
            1,
            1,
            t,
        );
        // Residual branch.
        conv_ctx_backward(
            &mut d_h,
            &mut bg.residual_w,
            &mut bg.residual_b,
            &cache.h_final[bi],
            bw.residual.w,
            &d_cur,
            c,
            c,
            1,
            1,
            t,
        );

        if let Some(fp) = film {
            let (gamma, _) = &fp.per_block[bi];
            let fg = grads
                .film
                .as_mut()
                .expect("film grads allocated for film mode");
            let (d_gamma, d_beta) = &mut fg[bi];
            let h_gated = &cache.h_gated[bi];
            for ch in 0..c {
                let dh_row = &d_h[ch * t..(ch + 1) * t];
                let hg_row = &h_gated[ch * t..(ch + 1) * t];
                d_gamma[ch] += crate::nn::conv::dot(dh_row, hg_row);
                d_beta[ch] += crate::nn::conv::sum(dh_row);
            }
            for ch in 0..c {
                let g = gamma[ch];
                for v in d_h[ch * t..(ch + 1) * t].iter_mut() {
                    *v *= g;
                }
            }
        }

        {
            let (d_zf, d_zg) = d_z.split_at_mut(c * t);
            crate::nn::act::gated_backward(
                &d_h,
                &cache.tanh_vals[bi],
                &cache.sig_vals[bi],
                d_zf,
                d_zg,
            );
        }

        let mut d_ext = vec![S::ZERO; c * ext_cols];
        conv_ctx_backward(
            &mut d_ext,
            &mut bg.dilated_w,
            &mut bg.dilated_b,
            &cache.block_ext[bi],
            bw.dilated.w,
            &d_z,
            2 * c,
            c,
            k,
            d,
            t,
        );
        // d(residual input) = identity branch + conv branch (context columns
        // correspond to zero padding and are discarded).
        for ch in 0..c {
            let src = &d_ext[ch * ext_cols + ctx..(ch + 1) * ext_cols];
            let dst = &mut d_cur[ch * t..(ch + 1) * t];
            for i in 0..t {
                dst[i] += src[i];
            }
        }
    }

    // Input projection.
    let mut d_x = vec![S::ZERO; t];
    conv_ctx_backward(
        &mut d_x,
        &mut grads.input_w,
        &mut grads.input_b,
        &cache.input,
        weights.input_layer().w,
        &d_cur,
        c,
        1,
        1,
        1,
        t,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GcnConfig {
        GcnConfig {
            num_blocks: 3,
            channels: 4,
            kernel_size: 3,
            skip_channels: 4,
            dilations: vec![1, 2, 4],
            cond_mode: CondMode::None,
        }
    }

    #[test]
    fn receptive_field_desk_default() {
        let cfg = GcnConfig::desk(CondMode::None);
        assert_eq!(receptive_field(&cfg), 1 + 2 * 1023); // 2047
    }

    #[test]
    fn receptive_field_single_block() {
        let cfg = GcnConfig {
            num_blocks: 1,
            channels: 2,
            kernel_size: 2,
            skip_channels: 2,
            dilations: vec![1],
            cond_mode: CondMode::None,
        };
        assert_eq!(receptive_field(&cfg), 2);
    }

    #[test]
    fn receptive_field_impulse_probe() {
        // Impulse response support must end exactly at the receptive field.
        let mut rng = Rng::new(5);
        let cfg = small_config();
        let rf = receptive_field(&cfg);
        let model: GcnModel<f64> = GcnModel::init(cfg, &mut rng).unwrap();
        let t = rf + 32;
        let zero_in = vec![0.0; t];
        let y0 = gcn_forward(&model, None, &zero_in).unwrap();
        let mut imp = vec![0.0; t];
        imp[0] = 1.0;
        let y1 = gcn_forward(&model, None, &imp).unwrap();
        let mut last_affected = 0;
        for i in 0..t {
            if (y1[i] - y0[i]).abs() > 1e-12 {
                last_affected = i;
            }
        }
        assert!(
            last_affected < rf,
            "impulse affected sample {last_affected}, rf {rf}"
        );
        // The dilated stack actually uses its field: some late sample within
        // the window must differ.
        assert!(
            (rf / 2..rf).any(|i| (y1[i] - y0[i]).abs() > 1e-15),
            "receptive field unused"
        );
    }

    #[test]
    fn enumerate_cond_layers_counts() {
        let mut rng = Rng::new(0);
        let paper: GcnModel<f32> =
            GcnModel::init(GcnConfig::paper_scale(CondMode::Hypernet), &mut rng).unwrap();
        assert_eq!(paper.enumerate_cond_layers().len(), 60);

        let single = GcnConfig {
            num_blocks: 1,
            channels: 2,
            kernel_size: 2,
            skip_channels: 3,
            dilations: vec![1],
            cond_mode: CondMode::None,
        };
        let m: GcnModel<f32> = GcnModel::init(single, &mut rng).unwrap();
        let desc = m.enumerate_cond_layers();
        assert_eq!(desc.len(), 3);
        assert_eq!(desc[0].role, LayerRole::Dilated);
        assert_eq!(desc[1].role, LayerRole::Residual);
        assert_eq!(desc[2].role, LayerRole::Skip);
    }

    #[test]
    fn descriptor_shapes_match_parameters() {
        let mut rng = Rng::new(77);
        for seed in 0..4u64 {
            let cfg = GcnConfig {
                num_blocks: 2 + (seed as usize % 3),
                channels: 3 + seed as usize,
                kernel_size: 2 + (seed as usize % 2),
                skip_channels: 2 + seed as usize,
                dilations: dilation_pattern(2 + (seed as usize % 3), 4),
                cond_mode: CondMode::None,
            };
            let m: GcnModel<f32> = GcnModel::init(cfg, &mut rng).unwrap();
            for (idx, desc) in m.enumerate_cond_layers().iter().enumerate() {
                let (w, b) = m.cond_layer(idx);
                assert_eq!(w.shape(), desc.w_shape);
                assert_eq!(b.len(), desc.b_len);
            }
        }
    }

    #[test]
    fn zero_input_zero_biases_zero_output() {
        let mut rng = Rng::new(1);
        let model: GcnModel<f32> = GcnModel::init(small_config(), &mut rng).unwrap();
        // Biases are zero-initialized; tanh(0)*sigmoid(0)=0 everywhere, so the
        // whole stack stays at zero.
        let y = gcn_forward(&model, None, &vec![0.0f32; 64]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_matches_input_length() {
        let mut rng = Rng::new(2);
        let model: GcnModel<f32> = GcnModel::init(small_config(), &mut rng).unwrap();
        for t in [1usize, 100, 44_100] {
            let x: Vec<f32> = (0..t)
                .map(|i| ((i * 37) % 100) as f32 / 100.0 - 0.5)
                .collect();
            let y = gcn_forward(&model, None, &x).unwrap();
            assert_eq!(y.len(), t);
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn unconditioned_forward_is_pure() {
        let mut rng = Rng::new(3);
        let model: GcnModel<f32> = GcnModel::init(small_config(), &mut rng).unwrap();
        let x: Vec<f32> = (0..500).map(|_| rng.next_f32() - 0.5).collect();
        let y1 = gcn_forward(&model, None, &x).unwrap();
        let y2 = gcn_forward(&model, None, &x).unwrap();
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn whole_generator_is_causal() {
        let mut rng = Rng::new(4);
        let model: GcnModel<f64> = GcnModel::init(small_config(), &mut rng).unwrap();
        let t = 200;
        let x: Vec<f64> = (0..t).map(|_| rng.normal() * 0.3).collect();
        let y = gcn_forward(&model, None, &x).unwrap();
        let mut x2 = x.clone();
        let t_perturb = 150;
        x2[t_perturb] += 1.0;
        let y2 = gcn_forward(&model, None, &x2).unwrap();
        for i in 0..t_perturb {
            assert_eq!(y[i], y2[i], "future leak at {i}");
        }
    }

    #[test]
    fn train_forward_matches_inference_forward() {
        let mut rng = Rng::new(6);
        let model: GcnModel<f64> = GcnModel::init(small_config(), &mut rng).unwrap();
        let x: Vec<f64> = (0..128).map(|_| rng.normal() * 0.2).collect();
        let infer = gcn_forward(&model, None, &x).unwrap();
        let cache = forward_train(&model, &model.config, None, &x).unwrap();
        for (a, b) in infer.iter().zip(&cache.output) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn film_identity_params_leave_output_unchanged() {
        let mut rng = Rng::new(8);
        let mut cfg = small_config();
        cfg.cond_mode = CondMode::Film;
        let model: GcnModel<f32> = GcnModel::init(cfg.clone(), &mut rng).unwrap();
        let x: Vec<f32> = (0..300).map(|_| rng.next_f32() - 0.5).collect();
        let film = FilmParams {
            per_block: (0..cfg.num_blocks)
                .map(|_| (vec![1.0f32; cfg.channels], vec![0.0f32; cfg.channels]))
                .collect(),
        };
        let y_film = gcn_forward(&model, Some(&film), &x).unwrap();

        let mut cfg_none = cfg.clone();
        cfg_none.cond_mode = CondMode::None;
        let mut model_none = model.clone();
        model_none.config = cfg_none;
        let y_none = gcn_forward(&model_none, None, &x).unwrap();
        assert!(y_film
            .iter()
            .zip(&y_none)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn missing_film_params_is_contract_error() {
        let mut rng = Rng::new(9);
        let mut cfg = small_config();
        cfg.cond_mode = CondMode::Film;
        let model: GcnModel<f32> = GcnModel::init(cfg, &mut rng).unwrap();
        assert!(matches!(
            gcn_forward(&model, None, &[0.0, 0.1]),
            Err(Error::Contract(_))
        ));
    }
}
