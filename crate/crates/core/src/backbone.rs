//! A small post-norm encoder-decoder transformer with tied input/output
//! embeddings and fixed sinusoidal positions.
//!
//! The layer-level functions (`embed`, `encoder_layer`, `decoder_layer`,
//! `project`) are public so the composition engine can interleave adapters
//! between layers; `encode`, `decode` and `generate` run the bare backbone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Var};
use crate::init::{sample_categorical, seeded, unit, xavier, SeededRng};
use crate::layers::{add_attention, add_ffn, add_norm, attention, embed_with_positions, ffn, norm, sinusoidal, AttentionSlots, FfnSlots, NormSlots};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamTable;
use crate::tensor::{argmax, log_softmax, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl BackboneConfig {
    /// 2 + 2 layers, d = 64, 4 heads, ffn 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            max_len: 32,
            vocab_size,
        }
    }

    /// 12 + 12 layers, d = 1024, 16 heads, ffn 4096, 50,265 tokens. Only
    /// used for parameter accounting.
    pub fn reference_scale() -> Self {
        Self {
            encoder_layers: 12,
            decoder_layers: 12,
            hidden_dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            max_len: 1024,
            vocab_size: 50265,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Layers that carry an adapter: every encoder and decoder layer.
    pub fn adapter_layers(&self) -> usize {
        self.encoder_layers + self.decoder_layers
    }

    /// Closed-form parameter count of the topology built by [`BackboneModel::build`].
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim;
        let attention = 4 * (d * d + d);
        let ffn = 2 * d * f + f + d;
        let norm = 2 * d;
        let encoder = attention + ffn + 2 * norm;
        let decoder = 2 * attention + ffn + 3 * norm;
        self.vocab_size * d // tied embedding
            + self.vocab_size // output bias
            + 2 * norm // embedding norms
            + self.encoder_layers * encoder
            + self.decoder_layers * decoder
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderSlots {
    attention: AttentionSlots,
    norm1: NormSlots,
    ffn: FfnSlots,
    norm2: NormSlots,
}

#[derive(Clone, Copy, Debug)]
struct DecoderSlots {
    self_attention: AttentionSlots,
    norm1: NormSlots,
    cross_attention: AttentionSlots,
    norm2: NormSlots,
    ffn: FfnSlots,
    norm3: NormSlots,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    config: BackboneConfig,
    params: ParamTable,
    embedding: usize,
    out_bias: usize,
    encoder_norm: NormSlots,
    decoder_norm: NormSlots,
    encoder: Vec<EncoderSlots>,
    decoder: Vec<DecoderSlots>,
    positions: Tensor,
    frozen: bool,
}

impl BackboneModel {
    /// Deterministic initialisation for a fixed seed.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let mut p = ParamTable::new(Group::Backbone);

        let embedding = p.add("embedding", xavier(&mut rng, config.vocab_size, d));
        let out_bias = p.add("output_bias", Tensor::zeros(1, config.vocab_size));
        let norm = |p: &mut ParamTable, name: &str| add_norm(p, name, d);
        let encoder_norm = norm(&mut p, "encoder.embed_norm");
        let decoder_norm = norm(&mut p, "decoder.embed_norm");
        let attention = add_attention;
        let ffn = add_ffn;

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let base = format!("encoder.{l}");
            let attention = attention(&mut p, &mut rng, &format!("{base}.self_attn"), d);
            let norm1 = norm(&mut p, &format!("{base}.norm1"));
            let ffn = ffn(&mut p, &mut rng, &format!("{base}.ffn"), d, f);
            let norm2 = norm(&mut p, &format!("{base}.norm2"));
            encoder.push(EncoderSlots { attention, norm1, ffn, norm2 });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let base = format!("decoder.{l}");
            let self_attention = attention(&mut p, &mut rng, &format!("{base}.self_attn"), d);
            let norm1 = norm(&mut p, &format!("{base}.norm1"));
            let cross_attention = attention(&mut p, &mut rng, &format!("{base}.cross_attn"), d);
            let norm2 = norm(&mut p, &format!("{base}.norm2"));
            let ffn = ffn(&mut p, &mut rng, &format!("{base}.ffn"), d, f);
            let norm3 = norm(&mut p, &format!("{base}.norm3"));
            decoder.push(DecoderSlots { self_attention, norm1, cross_attention, norm2, ffn, norm3 });
        }

        Ok(Self {
            config,
            params: p,
            embedding,
            out_bias,
            encoder_norm,
            decoder_norm,
            encoder,
            decoder,
            positions: sinusoidal(config.max_len, d),
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    /// Mutable access is refused once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamTable> {
        if self.frozen {
            return Err(Error::Contract("backbone is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn checksum(&self) -> alloc::string::String {
        self.params.checksum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Length { len: ids.len(), max: self.config.max_len });
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    // ---- graph-level building blocks -------------------------------------

    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize], side: Side) -> Var {
        let x = embed_with_positions(g, &self.params, self.embedding, &self.positions, ids);
        let n = match side {
            Side::Encoder => self.encoder_norm,
            Side::Decoder => self.decoder_norm,
        };
        norm(g, &self.params, n, x)
    }

    fn attention<'a>(&'a self, g: &mut Graph<'a>, a: AttentionSlots, query: Var, memory: Var, causal: bool) -> Var {
        attention(g, &self.params, a, self.config.heads, query, memory, causal)
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a>, n: NormSlots, x: Var) -> Var {
        norm(g, &self.params, n, x)
    }

    fn ffn<'a>(&'a self, g: &mut Graph<'a>, f: FfnSlots, x: Var) -> Var {
        ffn(g, &self.params, f, x)
    }

    pub fn encoder_layer<'a>(&'a self, g: &mut Graph<'a>, layer: usize, x: Var) -> Var {
        let s = self.encoder[layer];
        let a = self.attention(g, s.attention, x, x, false);
        let h = g.add(x, a);
        let h = self.norm(g, s.norm1, h);
        let f = self.ffn(g, s.ffn, h);
        let o = g.add(h, f);
        self.norm(g, s.norm2, o)
    }

    pub fn decoder_layer<'a>(&'a self, g: &mut Graph<'a>, layer: usize, y: Var, memory: Var) -> Var {
        let s = self.decoder[layer];
        let a = self.attention(g, s.self_attention, y, y, true);
        let h = g.add(y, a);
        let h = self.norm(g, s.norm1, h);
        let c = self.attention(g, s.cross_attention, h, memory, false);
        let h2 = g.add(h, c);
        let h2 = self.norm(g, s.norm2, h2);
        let f = self.ffn(g, s.ffn, h2);
        let o = g.add(h2, f);
        self.norm(g, s.norm3, o)
    }

    /// Tied output projection: `y · Eᵀ + b`.
    pub fn project<'a>(&'a self, g: &mut Graph<'a>, y: Var) -> Var {
        let e = g.param(self.params.get(self.embedding));
        let b = g.param(self.params.get(self.out_bias));
        let logits = g.matmul_t(y, e);
        g.add_row(logits, b)
    }

    /// Tensor form of [`Self::project`] for a single hidden row.
    pub fn project_row(&self, h: &[f64]) -> Vec<f64> {
        let e = &self.params.get(self.embedding).value;
        let b = self.params.get(self.out_bias).value.data();
        (0..e.rows()).map(|v| crate::tensor::dot(e.row(v), h) + b[v]).collect()
    }

    /// Bare encoder over one sentence.
    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize]) -> Var {
        let mut x = self.embed(g, ids, Side::Encoder);
        for l in 0..self.config.encoder_layers {
            x = self.encoder_layer(g, l, x);
        }
        x
    }

    /// Bare decoder over one prefix, returning logits.
    pub fn decode_graph<'a>(&'a self, g: &mut Graph<'a>, prefix: &[usize], memory: Var) -> Var {
        let mut y = self.embed(g, prefix, Side::Decoder);
        for l in 0..self.config.decoder_layers {
            y = self.decoder_layer(g, l, y, memory);
        }
        self.project(g, y)
    }

    // ---- tensor-level API -------------------------------------------------

    pub fn encode(&self, batch: &[Vec<usize>]) -> Result<HiddenStates> {
        let mut rows = Vec::with_capacity(batch.len());
        for ids in batch {
            self.check_tokens(ids)?;
            let mut g = Graph::inference();
            let out = self.encode_graph(&mut g, ids);
            rows.push(g.value(out).clone());
        }
        HiddenStates::from_rows(&rows, self.config.hidden_dim)
    }

    /// Logits `(len(prefix) x vocab)` for every row of the batch.
    pub fn decode(&self, states: &HiddenStates, prefixes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        if prefixes.len() != states.batch() {
            return Err(Error::Shape(format!(
                "{} prefixes for a batch of {}",
                prefixes.len(),
                states.batch()
            )));
        }
        let mut out = Vec::with_capacity(prefixes.len());
        for (b, prefix) in prefixes.iter().enumerate() {
            check_prefix(self, prefix)?;
            let memory = states.row(b);
            let mut g = Graph::inference();
            let m = g.constant(memory);
            let logits = self.decode_graph(&mut g, prefix, m);
            out.push(g.value(logits).clone());
        }
        Ok(out)
    }

    pub fn generate(&self, states: &HiddenStates, mode: DecodeMode, max_len: usize, seed: u64) -> Result<Vec<Generated>> {
        let mut rng = seeded(seed);
        let mut out = Vec::with_capacity(states.batch());
        for b in 0..states.batch() {
            let memory = states.row(b);
            let mut step = |prefix: &[usize]| -> Result<Vec<f64>> {
                let mut g = Graph::inference();
                let m = g.constant_ref(&memory);
                let logits = self.decode_graph(&mut g, prefix, m);
                let v = g.value(logits);
                Ok(v.row(v.rows() - 1).to_vec())
            };
            out.push(generate_sequence(&mut step, mode, max_len.min(self.config.max_len), &mut rng)?);
        }
        Ok(out)
    }
}

pub(crate) fn check_prefix(model: &BackboneModel, prefix: &[usize]) -> Result<()> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Input("decoder prefix must start with begin-of-sequence".into()));
    }
    model.check_tokens(prefix)
}

/// Encoder outputs for a padded batch: `(batch, time, hidden)` plus a `(batch, time)` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    batch: usize,
    time: usize,
    hidden: usize,
    data: Vec<f64>,
    mask: Vec<u8>,
}

impl HiddenStates {
    pub fn from_rows(rows: &[Tensor], hidden: usize) -> Result<Self> {
        let time = rows.iter().map(Tensor::rows).max().unwrap_or(0);
        let mut data = vec![0.0; rows.len() * time * hidden];
        let mut mask = vec![0u8; rows.len() * time];
        for (b, r) in rows.iter().enumerate() {
            if r.cols() != hidden {
                return Err(Error::Shape(format!("row {b} has width {}, expected {hidden}", r.cols())));
            }
            if !r.is_finite() {
                return Err(Error::Numerical(format!("non-finite hidden state in row {b}")));
            }
            let base = b * time * hidden;
            data[base..base + r.len()].copy_from_slice(r.data());
            mask[b * time..b * time + r.rows()].iter_mut().for_each(|m| *m = 1);
        }
        Ok(Self { batch: rows.len(), time, hidden, data, mask })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.time, self.hidden)
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn length(&self, b: usize) -> usize {
        self.mask[b * self.time..(b + 1) * self.time].iter().filter(|m| **m == 1).count()
    }

    pub fn get(&self, b: usize, t: usize, h: usize) -> f64 {
        self.data[(b * self.time + t) * self.hidden + h]
    }

    /// Unpadded `(length x hidden)` matrix of row `b`.
    pub fn row(&self, b: usize) -> Tensor {
        let len = self.length(b);
        let base = b * self.time * self.hidden;
        Tensor::from_vec(len, self.hidden, self.data[base..base + len * self.hidden].to_vec())
            .expect("length matches mask")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Ancestral sampling from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
}

impl DecodeMode {
    pub fn sample() -> Self {
        DecodeMode::Sample { temperature: 1.0 }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            DecodeMode::Greedy => 1.0,
            DecodeMode::Sample { temperature } => *temperature,
        }
    }
}

/// One decoded sequence. `tokens` excludes begin-of-sequence and includes the
/// terminating end-of-sequence when one was emitted; `log_probs[i]` is the
/// log-probability of `tokens[i]` under the decoding distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl Generated {
    /// Tokens without the trailing end-of-sequence.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Decoder input for teacher forcing the emitted tokens.
    pub fn teacher_prefix(&self) -> Vec<usize> {
        core::iter::once(BOS).chain(self.tokens[..self.tokens.len().saturating_sub(1)].iter().copied()).collect()
    }
}

/// Runs an autoregressive decoder from begin-of-sequence. `next_logits` maps a
/// prefix to the logits of the next token. Emits at most `max_len` tokens.
pub fn generate_sequence(
    next_logits: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    mode: DecodeMode,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<Generated> {
    let mut prefix = vec![BOS];
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    while tokens.len() < max_len {
        let logits = next_logits(&prefix)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits during generation".into()));
        }
        let (tok, lp) = match mode {
            DecodeMode::Greedy => {
                let ls = log_softmax(&logits);
                let t = argmax(&logits);
                (t, ls[t])
            }
            DecodeMode::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
                let ls = log_softmax(&scaled);
                let t = sample_categorical(rng, &softmax(&scaled));
                (t, ls[t])
            }
        };
        tokens.push(tok);
        log_probs.push(lp);
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    Ok(Generated { tokens, log_probs })
}

/// `Σ_t log softmax(logits_t / temperature)[targets_t]`.
pub fn sequence_log_prob(logits: &Tensor, targets: &[usize], temperature: f64) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row: Vec<f64> = logits.row(t).iter().map(|v| v / temperature).collect();
            log_softmax(&row)[y]
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that an encoder input token is replaced by `<unk>`.
    pub mask_prob: f64,
    /// Probability that one span of 1 to `max_span` tokens is collapsed
    /// into a single `<unk>` (text infilling).
    pub span_prob: f64,
    pub max_span: usize,
    /// Probability that the corrupted source is fully permuted.
    pub shuffle_prob: f64,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 16, learning_rate: 2e-3, mask_prob: 0.15, span_prob: 0.5, max_span: 3, shuffle_prob: 0.25, seed: 0 }
    }
}

/// Teacher-forced reconstruction of `target` from `source`: mean per-token
/// negative log-likelihood over `target + <eos>`.
pub fn reconstruction_graph<'a>(model: &'a BackboneModel, g: &mut Graph<'a>, source: &[usize], target: &[usize]) -> Var {
    let memory = model.encode_graph(g, source);
    let prefix: Vec<usize> = core::iter::once(BOS).chain(target.iter().copied()).collect();
    let gold: Vec<usize> = target.iter().copied().chain(core::iter::once(EOS)).collect();
    let logits = model.decode_graph(g, &prefix, memory);
    let nll = g.nll_sum(logits, &gold);
    g.scale(nll, 1.0 / gold.len() as f64)
}

fn corrupt(target: &[usize], config: &DenoiseConfig, rng: &mut SeededRng) -> Vec<usize> {
    let mut source: Vec<usize> =
        target.iter().map(|&t| if unit(rng) < config.mask_prob { UNK } else { t }).collect();
    if config.max_span > 0 && !source.is_empty() && unit(rng) < config.span_prob {
        let len = 1 + (unit(rng) * config.max_span as f64) as usize;
        let len = len.min(config.max_span).min(source.len());
        let start = ((unit(rng) * (source.len() - len + 1) as f64) as usize).min(source.len() - len);
        source.splice(start..start + len, core::iter::once(UNK));
    }
    if unit(rng) < config.shuffle_prob {
        crate::init::shuffle(rng, &mut source);
    }
    source
}

/// Pre-trains an unfrozen backbone as a masked denoising autoencoder over
/// `sentences` and returns the mean loss of every epoch.
pub fn pretrain_denoising(model: &mut BackboneModel, sentences: &[Vec<usize>], config: &DenoiseConfig) -> Result<Vec<f64>> {
    if model.is_frozen() {
        return Err(Error::Contract("cannot pre-train a frozen backbone".into()));
    }
    if sentences.is_empty() {
        return Err(Error::EmptySplit("no sentences to pre-train on".into()));
    }
    for s in sentences {
        model.check_tokens(s)?;
        if s.len() + 1 > model.config.max_len {
            return Err(Error::Length { len: s.len() + 1, max: model.config.max_len });
        }
    }
    let mut rng = seeded(config.seed);
    let mut opt = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() }, &model.params);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        crate::init::shuffle(&mut rng, &mut order);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = model.params.grad_buffer();
            for &i in chunk {
                let target = &sentences[i];
                let source = corrupt(target, config, &mut rng);
                let mut g = Graph::training(Group::Backbone);
                let loss = reconstruction_graph(model, &mut g, &source, target);
                total += g.value(loss).item();
                g.backward(loss, 1.0 / chunk.len() as f64, &mut grads);
            }
            opt.step(&mut model.params, &grads);
        }
        let mean = total / sentences.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical("denoising loss diverged".into()));
        }
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> BackboneConfig {
        BackboneConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 12,
            max_len: 12,
            vocab_size: vocab,
        }
    }

    #[test]
    fn closed_form_count_matches_built_model() {
        for cfg in [tiny(9), BackboneConfig::toy(40)] {
            let m = BackboneModel::build(cfg, 1).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn toy_count_by_hand() {
        // d=64, f=128, V=100, 2+2 layers
        // attention 4*(4096+64)=16640, ffn 2*64*128+128+64=16576, norm 128
        // encoder 16640+16576+256=33472, decoder 33280+16576+384=50240
        // 6400 + 100 + 256 + 2*33472 + 2*50240 = 174180
        assert_eq!(BackboneConfig::toy(100).parameter_count(), 174_180);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut cfg = BackboneConfig::toy(10);
        cfg.heads = 5;
        assert!(matches!(BackboneModel::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = BackboneConfig { encoder_layers: 2, decoder_layers: 2, hidden_dim: 64, heads: 4, ffn_dim: 128, max_len: 16, vocab_size: 20 };
        let a = BackboneModel::build(cfg, 3).unwrap();
        let b = BackboneModel::build(cfg, 3).unwrap();
        let c = BackboneModel::build(cfg, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn encode_pads_and_masks() {
        let m = BackboneModel::build(BackboneConfig::toy(20), 0).unwrap();
        let hs = m.encode(&[vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7, 8, 9, 10]]).unwrap();
        assert_eq!(hs.shape(), (2, 7, 64));
        assert_eq!(&hs.mask()[..7], &[1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(hs.get(0, 6, 3), 0.0);
        assert!(hs.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn duplicate_rows_encode_identically() {
        let m = BackboneModel::build(BackboneConfig::toy(20), 0).unwrap();
        let hs = m.encode(&[vec![4, 9, 6], vec![4, 9, 6]]).unwrap();
        assert_eq!(hs.row(0), hs.row(1));
    }

    #[test]
    fn overlong_input_is_a_length_error() {
        let m = BackboneModel::build(tiny(9), 0).unwrap();
        let err = m.encode(&[vec![4; 13]]).unwrap_err();
        assert_eq!(err, Error::Length { len: 13, max: 12 });
    }

    #[test]
    fn decode_is_causal() {
        let m = BackboneModel::build(tiny(9), 2).unwrap();
        let hs = m.encode(&[vec![4, 5, 6]]).unwrap();
        let short = m.decode(&hs, &[vec![BOS, 7, 8]]).unwrap();
        let long = m.decode(&hs, &[vec![BOS, 7, 8, 4, 6]]).unwrap();
        assert_eq!(short[0].shape(), (3, 9));
        assert_eq!(long[0].shape(), (5, 9));
        for t in 0..3 {
            for (a, b) in short[0].row(t).iter().zip(long[0].row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_requires_bos() {
        let m = BackboneModel::build(tiny(9), 2).unwrap();
        let hs = m.encode(&[vec![4, 5]]).unwrap();
        assert!(matches!(m.decode(&hs, &[vec![4, 5]]), Err(Error::Input(_))));
    }

    #[test]
    fn generated_log_probs_match_teacher_forcing() {
        let m = BackboneModel::build(tiny(9), 5).unwrap();
        let hs = m.encode(&[vec![4, 5, 6], vec![7, 8]]).unwrap();
        for mode in [DecodeMode::Greedy, DecodeMode::sample()] {
            let gens = m.generate(&hs, mode, 6, 17).unwrap();
            for (b, gen) in gens.iter().enumerate() {
                assert_eq!(gen.tokens.len(), gen.log_probs.len());
                assert!(gen.tokens.len() <= 6);
                assert!(gen.log_probs.iter().all(|lp| *lp <= 0.0));
                let sub = HiddenStates::from_rows(&[hs.row(b)], 8).unwrap();
                let logits = m.decode(&sub, &[gen.teacher_prefix()]).unwrap();
                let tf = sequence_log_prob(&logits[0], &gen.tokens, 1.0);
                assert!((tf - gen.total_log_prob()).abs() < 1e-9, "{tf} vs {}", gen.total_log_prob());
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = BackboneModel::build(tiny(9), 5).unwrap();
        let hs = m.encode(&[vec![4, 5, 6]]).unwrap();
        let a = m.generate(&hs, DecodeMode::sample(), 8, 3).unwrap();
        let b = m.generate(&hs, DecodeMode::sample(), 8, 3).unwrap();
        assert_eq!(a, b);
        let g1 = m.generate(&hs, DecodeMode::Greedy, 8, 1).unwrap();
        let g2 = m.generate(&hs, DecodeMode::Greedy, 8, 2).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn denoising_reduces_loss_and_refuses_frozen() {
        let mut m = BackboneModel::build(tiny(9), 0).unwrap();
        let data = vec![vec![4, 5, 6], vec![7, 8, 4], vec![5, 5, 6, 7]];
        let cfg = DenoiseConfig { epochs: 30, batch_size: 3, learning_rate: 1e-2, mask_prob: 0.0, span_prob: 0.0, shuffle_prob: 0.0, seed: 1, ..Default::default() };
        let hist = pretrain_denoising(&mut m, &data, &cfg).unwrap();
        assert!(hist.last().unwrap() < &(hist[0] * 0.5), "{hist:?}");
        m.freeze();
        assert!(pretrain_denoising(&mut m, &data, &cfg).is_err());
        assert!(m.params_mut().is_err());
    }
}
