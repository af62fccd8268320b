//! Tone conditioning: the hypernetwork that generates multiplicative weight
//! and bias deltas for every conditionable generator layer, the FiLM
//! baseline, and weight baking for the streaming path.
//!
//! Modulation follows w' = w * (1 + dw), b' = b * (1 + db). Hyper layer
//! output stages are zero-initialized, so a fresh hypernetwork reproduces
//! the unconditioned generator exactly; the FiLM generator starts at
//! gamma = 1, beta = 0 for the same reason.

use crate::error::{Error, Result};
use crate::gcn::{
    BlockW, CondMode, FilmParams, GcnConfig, GcnModel, LayerDescriptor, LayerW, WeightSource,
};
use crate::nn::affine::Affine;
use crate::nn::tensor::ParamTensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Fixed-length unit-norm tone embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToneEmbedding {
    vector: Vec<f32>,
    source_id: Option<String>,
}

impl ToneEmbedding {
    /// Normalizes to unit L2 norm. Zero or non-finite input is rejected.
    pub fn new(raw: Vec<f32>, source_id: Option<String>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Contract("embedding must be non-empty".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        let norm = raw
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("zero-norm embedding".into()));
        }
        let vector = raw.iter().map(|v| (*v as f64 / norm) as f32).collect();
        Ok(ToneEmbedding { vector, source_id })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn source_id(&self) -> Option<&str> {
        self.source_id.as_deref()
    }

    pub fn l2_norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over the little-endian bytes of the vector.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.vector.iter().flat_map(|v| v.to_le_bytes()))
    }

    pub fn cosine(&self, other: &ToneEmbedding) -> f64 {
        self.vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

pub fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Delta resolution per conditioned layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One dw per output channel, broadcast over input x kernel; db per
    /// output channel.
    PerChannel,
    /// dw elementwise over the full weight tensor.
    Full,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::PerChannel => "per_channel",
            Granularity::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_channel" => Ok(Granularity::PerChannel),
            "full" => Ok(Granularity::Full),
            other => Err(Error::Contract(format!("unknown granularity '{other}'"))),
        }
    }

    pub fn delta_w_len(&self, w_shape: [usize; 3]) -> usize {
        match self {
            Granularity::PerChannel => w_shape[0],
            Granularity::Full => w_shape[0] * w_shape[1] * w_shape[2],
        }
    }
}

/// w' = w * (1 + dw), b' = b * (1 + db), with dw broadcast over the
/// input x kernel dims when it carries one value per output channel.
pub fn modulate_weights<S: Scalar>(
    w: &[S],
    b: &[S],
    dw: &[S],
    db: &[S],
    w_shape: [usize; 3],
    w_out: &mut [S],
    b_out: &mut [S],
) -> Result<()> {
    let [c_out, c_in, k] = w_shape;
    if w.len() != c_out * c_in * k || b.len() != c_out || db.len() != c_out {
        return Err(Error::Contract(format!(
            "modulation shape mismatch: w {} vs {:?}, b {}, db {}",
            w.len(),
            w_shape,
            b.len(),
            db.len()
        )));
    }
    if dw.len() != c_out && dw.len() != w.len() {
        return Err(Error::Contract(format!(
            "dw length {} is neither per-channel ({c_out}) nor full ({})",
            dw.len(),
            w.len()
        )));
    }
    if dw.iter().chain(db.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite modulation delta".into()));
    }
    if dw.len() == w.len() {
        for i in 0..w.len() {
            w_out[i] = w[i] * (S::ONE + dw[i]);
        }
    } else {
        let per = c_in * k;
        for c in 0..c_out {
            let f = S::ONE + dw[c];
            for i in 0..per {
                w_out[c * per + i] = w[c * per + i] * f;
            }
        }
    }
    for c in 0..c_out {
        b_out[c] = b[c] * (S::ONE + db[c]);
    }
    Ok(())
}

/// Adjoint of [`modulate_weights`]: routes gradients on (w', b') into the
/// base weights and the deltas.
pub fn modulate_backward<S: Scalar>(
    w: &[S],
    b: &[S],
    dw: &[S],
    db: &[S],
    w_shape: [usize; 3],
    d_w_prime: &[S],
    d_b_prime: &[S],
    d_w: &mut [S],
    d_b: &mut [S],
    d_dw: &mut [S],
    d_db: &mut [S],
) {
    let [c_out, c_in, k] = w_shape;
    let per = c_in * k;
    if dw.len() == w.len() {
        for i in 0..w.len() {
            d_w[i] += d_w_prime[i] * (S::ONE + dw[i]);
            d_dw[i] += d_w_prime[i] * w[i];
        }
    } else {
        for c in 0..c_out {
            let f = S::ONE + dw[c];
            let mut acc = S::ZERO;
            for i in 0..per {
                let idx = c * per + i;
                d_w[idx] += d_w_prime[idx] * f;
                acc += d_w_prime[idx] * w[idx];
            }
            d_dw[c] += acc;
        }
    }
    for c in 0..c_out {
        d_b[c] += d_b_prime[c] * (S::ONE + db[c]);
        d_db[c] += d_b_prime[c] * b[c];
    }
}

/// One delta generator: embedding -> hidden (tanh) -> (dw | db) for a single
/// target conv layer. The output stage starts at zero.
#[derive(Debug, Clone)]
pub struct HyperLayer<S: Scalar> {
    pub target: LayerDescriptor,
    pub l1: Affine<S>,
    pub l2: Affine<S>,
    pub n_w: usize,
    pub n_b: usize,
}

/// Per-layer forward cache: hidden activations plus emitted deltas.
#[derive(Debug, Clone)]
pub struct HyperLayerOut<S> {
    pub dw: Vec<S>,
    pub db: Vec<S>,
    hidden: Vec<S>,
}

impl<S: Scalar> HyperLayer<S> {
    pub(crate) fn init(
        idx: usize,
        target: LayerDescriptor,
        d_e: usize,
        hidden: usize,
        granularity: Granularity,
        rng: &mut Rng,
    ) -> Self {
        let n_w = granularity.delta_w_len(target.w_shape);
        let n_b = target.b_len;
        HyperLayer {
            l1: Affine::kaiming(&format!("hyper.{idx}.l1"), d_e, hidden, rng),
            l2: Affine::zeroed(&format!("hyper.{idx}.l2"), hidden, n_w + n_b),
            target,
            n_w,
            n_b,
        }
    }

    pub fn forward(&self, phi: &[S]) -> HyperLayerOut<S> {
        let mut hidden = vec![S::ZERO; self.l1.out_dim];
        self.l1.forward(phi, &mut hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut out = vec![S::ZERO; self.n_w + self.n_b];
        self.l2.forward(&hidden, &mut out);
        let db = out.split_off(self.n_w);
        HyperLayerOut {
            dw: out,
            db,
            hidden,
        }
    }

    pub(crate) fn backward(&mut self, phi: &[S], cache: &HyperLayerOut<S>, d_dw: &[S], d_db: &[S]) {
        let mut d_out = Vec::with_capacity(self.n_w + self.n_b);
        d_out.extend_from_slice(d_dw);
        d_out.extend_from_slice(d_db);
        let mut d_hidden = vec![S::ZERO; self.l1.out_dim];
        self.l2.backward(&cache.hidden, &d_out, Some(&mut d_hidden));
        // tanh backward; hidden cache stores post-activation values.
        for (dh, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            *dh *= S::ONE - *h * *h;
        }
        // phi is produced by the frozen encoder: no gradient flows further.
        self.l1.backward(phi, &d_hidden, None);
    }
}

/// The set {H_l}: one hyper layer per conditionable generator layer,
/// block-major (each generator block owns three).
#[derive(Debug, Clone)]
pub struct HyperNetwork<S: Scalar> {
    pub d_e: usize,
    pub hidden: usize,
    pub granularity: Granularity,
    pub layers: Vec<HyperLayer<S>>,
}

impl<S: Scalar> HyperNetwork<S> {
    pub fn init(
        model: &GcnModel<S>,
        d_e: usize,
        hidden: usize,
        granularity: Granularity,
        rng: &mut Rng,
    ) -> Self {
        let layers = model
            .enumerate_cond_layers()
            .into_iter()
            .enumerate()
            .map(|(i, desc)| HyperLayer::init(i, desc, d_e, hidden, granularity, rng))
            .collect();
        HyperNetwork {
            d_e,
            hidden,
            granularity,
            layers,
        }
    }

    /// Deltas for one layer: deterministic in (weights, phi).
    pub fn hyper_deltas(&self, phi: &[S], layer_index: usize) -> Result<(Vec<S>, Vec<S>)> {
        if layer_index >= self.layers.len() {
            return Err(Error::Contract(format!(
                "layer index {layer_index} out of range ({} hyper layers)",
                self.layers.len()
            )));
        }
        if phi.len() != self.d_e {
            return Err(Error::Contract(format!(
                "embedding dim {} != d_e {}",
                phi.len(),
                self.d_e
            )));
        }
        let out = self.layers[layer_index].forward(phi);
        Ok((out.dw, out.db))
    }

    pub fn forward_all(&self, phi: &[S]) -> Result<Vec<HyperLayerOut<S>>> {
        if phi.len() != self.d_e {
            return Err(Error::Contract(format!(
                "embedding dim {} != d_e {}",
                phi.len(),
                self.d_e
            )));
        }
        Ok(self.layers.iter().map(|l| l.forward(phi)).collect())
    }

    pub fn backward_all(
        &mut self,
        phi: &[S],
        caches: &[HyperLayerOut<S>],
        d_deltas: &[(Vec<S>, Vec<S>)],
    ) {
        for ((layer, cache), (d_dw, d_db)) in self.layers.iter_mut().zip(caches).zip(d_deltas) {
            layer.backward(phi, cache, d_dw, d_db);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                l.l1.params_mut()
                    .into_iter()
                    .chain(l.l2.params_mut().into_iter())
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<S>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.l1.w, &l.l1.b, &l.l2.w, &l.l2.b])
            .collect()
    }
}

/// FiLM baseline: per-block affine maps embedding -> (gamma, beta), applied
/// to the gated activation output. Initialized to the identity modulation.
#[derive(Debug, Clone)]
pub struct FilmGenerator<S: Scalar> {
    pub d_e: usize,
    pub channels: usize,
    pub per_block: Vec<Affine<S>>,
}

impl<S: Scalar> FilmGenerator<S> {
    pub fn init(num_blocks: usize, channels: usize, d_e: usize) -> Self {
        let per_block = (0..num_blocks)
            .map(|b| {
                let mut a = Affine::zeroed(&format!("film.{b}"), d_e, 2 * channels);
                // Bias carries [gamma | beta] = [1... | 0...] so any phi maps
                // to the identity at init.
                for c in 0..channels {
                    a.b.values_mut()[c] = S::ONE;
                }
                a
            })
            .collect();
        FilmGenerator {
            d_e,
            channels,
            per_block,
        }
    }

    /// (gamma, beta) for one block.
    pub fn film_params(&self, phi: &[S], block_index: usize) -> Result<(Vec<S>, Vec<S>)> {
        if phi.len() != self.d_e {
            return Err(Error::Contract(format!(
                "embedding dim {} != d_e {}",
                phi.len(),
                self.d_e
            )));
        }
        if block_index >= self.per_block.len() {
            return Err(Error::Contract(format!(
                "block index {block_index} out of range"
            )));
        }
        let mut out = vec![S::ZERO; 2 * self.channels];
        self.per_block[block_index].forward(phi, &mut out);
        let beta = out.split_off(self.channels);
        Ok((out, beta))
    }

    pub fn params_for(&self, phi: &[S]) -> Result<FilmParams<S>> {
        let per_block = (0..self.per_block.len())
            .map(|b| self.film_params(phi, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(FilmParams { per_block })
    }

    pub fn backward(&mut self, phi: &[S], d_film: &[(Vec<S>, Vec<S>)]) {
        for (affine, (d_gamma, d_beta)) in self.per_block.iter_mut().zip(d_film) {
            let mut d_out = Vec::with_capacity(2 * d_gamma.len());
            d_out.extend_from_slice(d_gamma);
            d_out.extend_from_slice(d_beta);
            affine.backward(phi, &d_out, None);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        self.per_block
            .iter_mut()
            .flat_map(|a| a.params_mut())
            .collect()
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<S>> {
        self.per_block.iter().flat_map(|a| [&a.w, &a.b]).collect()
    }
}

/// Whatever conditions the generator.
#[derive(Debug, Clone)]
pub enum Conditioning<S: Scalar> {
    None,
    Film(FilmGenerator<S>),
    Hyper(HyperNetwork<S>),
}

impl<S: Scalar> Conditioning<S> {
    pub fn mode(&self) -> CondMode {
        match self {
            Conditioning::None => CondMode::None,
            Conditioning::Film(_) => CondMode::Film,
            Conditioning::Hyper(_) => CondMode::Hypernet,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        match self {
            Conditioning::None => Vec::new(),
            Conditioning::Film(f) => f.params_mut(),
            Conditioning::Hyper(h) => h.params_mut(),
        }
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<S>> {
        match self {
            Conditioning::None => Vec::new(),
            Conditioning::Film(f) => f.tensors(),
            Conditioning::Hyper(h) => h.tensors(),
        }
    }
}

/// Fully materialized generator weights for one tone: base weights with the
/// hypernetwork's modulation applied once. Immutable, safe to hand to the
/// audio context.
#[derive(Debug, Clone)]
pub struct BakedWeights<S: Scalar> {
    pub config: GcnConfig,
    pub input_w: Vec<S>,
    pub input_b: Vec<S>,
    pub blocks: Vec<BakedBlock<S>>,
    pub head_w: Vec<S>,
    pub head_b: Vec<S>,
    pub fingerprint: u64,
}

#[derive(Debug, Clone)]
pub struct BakedBlock<S> {
    pub dilated_w: Vec<S>,
    pub dilated_b: Vec<S>,
    pub residual_w: Vec<S>,
    pub residual_b: Vec<S>,
    pub skip_w: Vec<S>,
    pub skip_b: Vec<S>,
}

impl<S: Scalar> WeightSource<S> for BakedWeights<S> {
    fn input_layer(&self) -> LayerW<'_, S> {
        LayerW {
            w: &self.input_w,
            b: &self.input_b,
        }
    }

    fn block_layers(&self, i: usize) -> BlockW<'_, S> {
        let b = &self.blocks[i];
        BlockW {
            dilated: LayerW {
                w: &b.dilated_w,
                b: &b.dilated_b,
            },
            residual: LayerW {
                w: &b.residual_w,
                b: &b.residual_b,
            },
            skip: LayerW {
                w: &b.skip_w,
                b: &b.skip_b,
            },
        }
    }

    fn head_layer(&self) -> LayerW<'_, S> {
        LayerW {
            w: &self.head_w,
            b: &self.head_b,
        }
    }
}

impl<S: Scalar> BakedWeights<S> {
    /// Plain copy of the base weights (unconditioned or FiLM streaming).
    pub fn from_base(model: &GcnModel<S>, fingerprint: u64) -> Self {
        BakedWeights {
            config: model.config.clone(),
            input_w: model.input_w.values().to_vec(),
            input_b: model.input_b.values().to_vec(),
            blocks: model
                .blocks
                .iter()
                .map(|b| BakedBlock {
                    dilated_w: b.dilated_w.values().to_vec(),
                    dilated_b: b.dilated_b.values().to_vec(),
                    residual_w: b.residual_w.values().to_vec(),
                    residual_b: b.residual_b.values().to_vec(),
                    skip_w: b.skip_w.values().to_vec(),
                    skip_b: b.skip_b.values().to_vec(),
                })
                .collect(),
            head_w: model.head_w.values().to_vec(),
            head_b: model.head_b.values().to_vec(),
            fingerprint,
        }
    }

    fn layer_mut(&mut self, idx: usize) -> (&mut Vec<S>, &mut Vec<S>) {
        let block = &mut self.blocks[idx / 3];
        match idx % 3 {
            0 => (&mut block.dilated_w, &mut block.dilated_b),
            1 => (&mut block.residual_w, &mut block.residual_b),
            _ => (&mut block.skip_w, &mut block.skip_b),
        }
    }

    /// Re-modulate in place from precomputed hyper layer outputs
    /// (training-path reuse; avoids reallocating the weight arrays). The
    /// unconditioned input/head layers are refreshed from the model as well,
    /// so the result always reflects the model's current weights.
    pub fn apply_deltas(&mut self, model: &GcnModel<S>, outs: &[HyperLayerOut<S>]) -> Result<()> {
        self.input_w.copy_from_slice(model.input_w.values());
        self.input_b.copy_from_slice(model.input_b.values());
        self.head_w.copy_from_slice(model.head_w.values());
        self.head_b.copy_from_slice(model.head_b.values());
        let descs = model.enumerate_cond_layers();
        for (idx, desc) in descs.iter().enumerate() {
            let (base_w, base_b) = model.cond_layer(idx);
            let (out_w, out_b) = self.layer_mut(idx);
            modulate_weights(
                base_w.values(),
                base_b.values(),
                &outs[idx].dw,
                &outs[idx].db,
                desc.w_shape,
                out_w,
                out_b,
            )?;
        }
        Ok(())
    }
}

/// Apply the hypernetwork once for `phi` and materialize static weights.
/// A forward pass with the result equals the conditioned forward exactly.
pub fn bake<S: Scalar>(
    model: &GcnModel<S>,
    hnet: &HyperNetwork<S>,
    phi: &ToneEmbedding,
) -> Result<BakedWeights<S>> {
    if model.config.cond_mode != CondMode::Hypernet {
        return Err(Error::Contract(format!(
            "bake requires cond_mode=hypernet, model is {}",
            model.config.cond_mode.as_str()
        )));
    }
    if phi.dim() != hnet.d_e {
        return Err(Error::Contract(format!(
            "embedding dim {} != hypernetwork d_e {}",
            phi.dim(),
            hnet.d_e
        )));
    }
    let phi_s: Vec<S> = phi
        .vector()
        .iter()
        .map(|&v| S::from_f64(v as f64))
        .collect();
    let mut baked = BakedWeights::from_base(model, phi.fingerprint());
    let descs = model.enumerate_cond_layers();
    for (idx, desc) in descs.iter().enumerate() {
        let (dw, db) = hnet.hyper_deltas(&phi_s, idx)?;
        let (base_w, base_b) = model.cond_layer(idx);
        let (out_w, out_b) = baked.layer_mut(idx);
        modulate_weights(
            base_w.values(),
            base_b.values(),
            &dw,
            &db,
            desc.w_shape,
            out_w,
            out_b,
        )?;
    }
    Ok(baked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcn::{gcn_forward, gcn_forward_weights};

    fn small_model(cond: CondMode, seed: u64) -> GcnModel<f32> {
        let cfg = GcnConfig {
            num_blocks: 3,
            channels: 4,
            kernel_size: 3,
            skip_channels: 4,
            dilations: vec![1, 2, 4],
            cond_mode: cond,
        };
        GcnModel::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn random_embedding(d_e: usize, seed: u64) -> ToneEmbedding {
        let mut rng = Rng::new(seed);
        ToneEmbedding::new((0..d_e).map(|_| rng.normal() as f32).collect(), None).unwrap()
    }

    #[test]
    fn embedding_unit_norm() {
        let e = random_embedding(64, 3);
        assert!((e.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_embedding_rejected() {
        assert!(ToneEmbedding::new(vec![0.0; 8], None).is_err());
    }

    #[test]
    fn modulate_identity_with_zero_deltas() {
        let w = [1.0f64, -2.0, 0.5, 3.0, -1.0, 0.25];
        let b = [0.5f64, -0.5];
        let mut wo = [0.0; 6];
        let mut bo = [0.0; 2];
        modulate_weights(
            &w,
            &b,
            &[0.0, 0.0],
            &[0.0, 0.0],
            [2, 3, 1],
            &mut wo,
            &mut bo,
        )
        .unwrap();
        assert_eq!(wo, w);
        assert_eq!(bo, b);
    }

    #[test]
    fn modulate_arithmetic() {
        let w = [1.0f64, -2.0];
        let b = [0.0f64, 0.0];
        let mut wo = [0.0; 2];
        let mut bo = [0.0; 2];
        modulate_weights(
            &w,
            &b,
            &[0.5, 0.25],
            &[0.0, 0.0],
            [2, 1, 1],
            &mut wo,
            &mut bo,
        )
        .unwrap();
        assert_eq!(wo, [1.5, -2.5]);
    }

    #[test]
    fn modulate_minus_one_silences_layer() {
        let w = [0.7f64, -0.3, 2.0];
        let b = [1.0f64];
        let mut wo = [9.0; 3];
        let mut bo = [9.0; 1];
        modulate_weights(&w, &b, &[-1.0], &[-1.0], [1, 3, 1], &mut wo, &mut bo).unwrap();
        assert_eq!(wo, [0.0, 0.0, -0.0]);
        assert_eq!(bo, [0.0]);
    }

    #[test]
    fn modulate_rejects_non_finite_delta() {
        let w = [1.0f64];
        let b = [0.0f64];
        let mut wo = [0.0; 1];
        let mut bo = [0.0; 1];
        let r = modulate_weights(&w, &b, &[f64::NAN], &[0.0], [1, 1, 1], &mut wo, &mut bo);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn fresh_hypernet_emits_zero_deltas() {
        let model = small_model(CondMode::Hypernet, 1);
        let hnet = HyperNetwork::init(&model, 16, 8, Granularity::PerChannel, &mut Rng::new(2));
        let phi = random_embedding(16, 9);
        let phi_f: Vec<f32> = phi.vector().to_vec();
        for idx in 0..hnet.layers.len() {
            let (dw, db) = hnet.hyper_deltas(&phi_f, idx).unwrap();
            assert!(dw.iter().all(|&v| v == 0.0));
            assert!(db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deltas_deterministic_in_phi() {
        let model = small_model(CondMode::Hypernet, 1);
        let mut hnet = HyperNetwork::init(&model, 16, 8, Granularity::PerChannel, &mut Rng::new(2));
        // Randomize the output stage so deltas are nonzero.
        let mut rng = Rng::new(33);
        for layer in hnet.layers.iter_mut() {
            for v in layer.l2.w.values_mut() {
                *v = (rng.normal() * 0.1) as f32;
            }
        }
        let phi = random_embedding(16, 9);
        let a = hnet.hyper_deltas(phi.vector(), 0).unwrap();
        let b = hnet.hyper_deltas(phi.vector(), 0).unwrap();
        assert_eq!(a, b);
        // A different embedding produces different deltas.
        let phi2 = random_embedding(16, 10);
        let c = hnet.hyper_deltas(phi2.vector(), 0).unwrap();
        assert!(a.0.iter().zip(&c.0).any(|(x, y)| x != y));
    }

    #[test]
    fn hypernet_identity_at_init_end_to_end() {
        for seed in 0..5u64 {
            let model = small_model(CondMode::Hypernet, seed);
            let hnet = HyperNetwork::init(
                &model,
                16,
                8,
                Granularity::PerChannel,
                &mut Rng::new(seed + 100),
            );
            let phi = random_embedding(16, seed + 200);
            let baked = bake(&model, &hnet, &phi).unwrap();
            let mut rng = Rng::new(seed + 300);
            let x: Vec<f32> = (0..400).map(|_| rng.next_f32() - 0.5).collect();
            let y_cond = gcn_forward_weights(&baked, &model.config, None, &x).unwrap();
            let mut base = model.clone();
            base.config.cond_mode = CondMode::None;
            let y_base = gcn_forward(&base, None, &x).unwrap();
            assert!(
                y_cond
                    .iter()
                    .zip(&y_base)
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "seed {seed}: identity-at-init violated"
            );
        }
    }

    #[test]
    fn baked_forward_equals_direct_modulated_forward() {
        // Direct-modulation oracle: modulate every layer by hand, run the
        // generic forward, compare against the baked view.
        for seed in 0..5u64 {
            let model = small_model(CondMode::Hypernet, seed);
            let mut hnet = HyperNetwork::init(
                &model,
                16,
                8,
                Granularity::PerChannel,
                &mut Rng::new(seed + 7),
            );
            let mut rng = Rng::new(seed + 40);
            for layer in hnet.layers.iter_mut() {
                for v in layer.l2.w.values_mut() {
                    *v = (rng.normal() * 0.2) as f32;
                }
                for v in layer.l2.b.values_mut() {
                    *v = (rng.normal() * 0.05) as f32;
                }
            }
            let phi = random_embedding(16, seed + 77);
            let baked = bake(&model, &hnet, &phi).unwrap();

            // Oracle: clone model, overwrite each cond layer with
            // w*(1+dw), b*(1+db) computed elementwise here.
            let mut oracle = model.clone();
            let descs = model.enumerate_cond_layers();
            for (idx, desc) in descs.iter().enumerate() {
                let (dw, db) = hnet.hyper_deltas(phi.vector(), idx).unwrap();
                let [c_out, c_in, k] = desc.w_shape;
                let per = c_in * k;
                let (w, b) = model.cond_layer(idx);
                let mut w_new = w.values().to_vec();
                let mut b_new = b.values().to_vec();
                for c in 0..c_out {
                    for i in 0..per {
                        w_new[c * per + i] = w.values()[c * per + i] * (1.0 + dw[c]);
                    }
                    b_new[c] = b.values()[c] * (1.0 + db[c]);
                }
                let params = oracle.params_mut();
                // params order: input(2), per block 6, head(2).
                let base = 2 + (idx / 3) * 6 + (idx % 3) * 2;
                params_set(params, base, &w_new, &b_new);
            }
            let mut rng2 = Rng::new(seed + 500);
            let x: Vec<f32> = (0..44_100).map(|_| rng2.next_f32() - 0.5).collect();
            let y_baked = gcn_forward_weights(&baked, &model.config, None, &x).unwrap();
            let mut oracle_none = oracle;
            oracle_none.config.cond_mode = CondMode::None;
            let y_oracle = gcn_forward(&oracle_none, None, &x).unwrap();
            let max_diff = y_baked
                .iter()
                .zip(&y_oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 1e-6, "seed {seed}: max diff {max_diff}");
        }
    }

    fn params_set(
        mut params: Vec<&mut ParamTensor<f32>>,
        base: usize,
        w_new: &[f32],
        b_new: &[f32],
    ) {
        params[base].values_mut().copy_from_slice(w_new);
        params[base + 1].values_mut().copy_from_slice(b_new);
    }

    #[test]
    fn different_embeddings_different_fingerprints() {
        let a = random_embedding(16, 1);
        let b = random_embedding(16, 2);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.fingerprint());
    }

    #[test]
    fn film_identity_at_init_for_any_phi() {
        let fg: FilmGenerator<f32> = FilmGenerator::init(3, 4, 16);
        for seed in 0..5 {
            let phi = random_embedding(16, seed);
            let params = fg.params_for(phi.vector()).unwrap();
            for (gamma, beta) in &params.per_block {
                assert!(gamma.iter().all(|&g| g == 1.0));
                assert!(beta.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn film_constant_override() {
        use crate::gcn::apply_film;
        let mut h = vec![0.3f32, -0.2, 0.7, 0.1];
        apply_film(&mut h, &[0.0, 0.0], &[0.5, 0.5], 2);
        assert_eq!(h, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn bake_requires_hypernet_mode() {
        let model = small_model(CondMode::None, 1);
        let hyper_model = small_model(CondMode::Hypernet, 1);
        let hnet = HyperNetwork::init(
            &hyper_model,
            16,
            8,
            Granularity::PerChannel,
            &mut Rng::new(0),
        );
        let phi = random_embedding(16, 0);
        assert!(matches!(bake(&model, &hnet, &phi), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_delta_bake_equals_base_bitwise() {
        let model = small_model(CondMode::Hypernet, 4);
        let hnet = HyperNetwork::init(&model, 16, 8, Granularity::PerChannel, &mut Rng::new(5));
        let phi = random_embedding(16, 6);
        let baked = bake(&model, &hnet, &phi).unwrap();
        for (idx, _) in model.enumerate_cond_layers().iter().enumerate() {
            let (w, b) = model.cond_layer(idx);
            let bw = baked.block_layers(idx / 3);
            let (vw, vb) = match idx % 3 {
                0 => (bw.dilated.w, bw.dilated.b),
                1 => (bw.residual.w, bw.residual.b),
                _ => (bw.skip.w, bw.skip.b),
            };
            assert!(w
                .values()
                .iter()
                .zip(vw)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(b
                .values()
                .iter()
                .zip(vb)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn full_granularity_modulates_elementwise() {
        let model = small_model(CondMode::Hypernet, 8);
        let mut hnet = HyperNetwork::init(&model, 8, 8, Granularity::Full, &mut Rng::new(9));
        let mut rng = Rng::new(50);
        for layer in hnet.layers.iter_mut() {
            for v in layer.l2.w.values_mut() {
                *v = (rng.normal() * 0.1) as f32;
            }
        }
        let phi = random_embedding(8, 3);
        let (dw, db) = hnet.hyper_deltas(phi.vector(), 0).unwrap();
        let desc = &model.enumerate_cond_layers()[0];
        assert_eq!(dw.len(), desc.w_shape.iter().product::<usize>());
        assert_eq!(db.len(), desc.b_len);
        // Elementwise law against the direct oracle.
        let (w, b) = model.cond_layer(0);
        let mut wo = vec![0.0f32; w.len()];
        let mut bo = vec![0.0f32; b.len()];
        modulate_weights(
            w.values(),
            b.values(),
            &dw,
            &db,
            desc.w_shape,
            &mut wo,
            &mut bo,
        )
        .unwrap();
        for i in 0..w.len() {
            assert_eq!(wo[i], w.values()[i] * (1.0 + dw[i]));
        }
        for i in 0..b.len() {
            assert_eq!(bo[i], b.values()[i] * (1.0 + db[i]));
        }
    }
}
