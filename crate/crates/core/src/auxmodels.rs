//! Guidance and evaluation models: a convolutional attribute classifier per
//! attribute and a small causal language model for perplexity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Var};
use crate::init::{seeded, shuffle, uniform, xavier};
use crate::layers::{add_attention, add_ffn, add_norm, attention, embed_with_positions, ffn, norm, sinusoidal, AttentionSlots, FfnSlots, NormSlots};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamTable;
use crate::tensor::{argmax, log_softmax, softmax, Tensor};

/// A token sequence with the value index of one attribute.
pub type Example = (Vec<usize>, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { embed_dim: 32, widths: vec![2, 3, 4], filters: 32, epochs: 6, batch_size: 32, learning_rate: 2e-3 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.filters == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("classifier batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional sentence classifier over the values of one attribute.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    attribute: String,
    values: Vec<String>,
    vocab_size: usize,
    config: ClassifierConfig,
    params: ParamTable,
    embedding: usize,
    convs: Vec<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

impl AttributeClassifier {
    pub fn new(attribute: &str, values: &[String], vocab_size: usize, config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if values.len() < 2 {
            return Err(Error::Config(format!("attribute `{attribute}` needs at least two values")));
        }
        let mut rng = seeded(seed);
        let mut p = ParamTable::new(Group::Classifier);
        let e = config.embed_dim;
        let embedding = p.add("embedding", uniform(&mut rng, vocab_size, e, 0.5));
        let mut convs = Vec::with_capacity(config.widths.len());
        for &w in &config.widths {
            let wt = p.add(format!("conv{w}.w"), xavier(&mut rng, w * e, config.filters));
            let bt = p.add(format!("conv{w}.b"), Tensor::zeros(1, config.filters));
            convs.push((wt, bt));
        }
        let features = config.filters * config.widths.len();
        let head_w = p.add("head.w", xavier(&mut rng, features, values.len()));
        let head_b = p.add("head.b", Tensor::zeros(1, values.len()));
        Ok(Self {
            attribute: attribute.into(),
            values: values.to_vec(),
            vocab_size,
            config,
            params: p,
            embedding,
            convs,
            head_w,
            head_b,
        })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Right-pads with `<pad>` up to the widest filter; an empty sequence
    /// becomes all padding.
    fn padded(&self, ids: &[usize]) -> Vec<usize> {
        let min = self.config.widths.iter().copied().max().unwrap_or(1);
        let mut v: Vec<usize> = ids.iter().map(|&i| if i < self.vocab_size { i } else { PAD }).collect();
        while v.len() < min {
            v.push(PAD);
        }
        v
    }

    pub fn logits_graph<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize]) -> Var {
        let ids = self.padded(ids);
        let table = g.param(self.params.get(self.embedding));
        let x = g.gather_rows(table, &ids);
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (&(w, b), &width) in self.convs.iter().zip(&self.config.widths) {
            let windows = g.unfold(x, width);
            let w = g.param(self.params.get(w));
            let b = g.param(self.params.get(b));
            let c = g.linear(windows, w, b);
            let c = g.relu(c);
            pooled.push(g.max_rows(c));
        }
        let features = g.concat_cols(&pooled);
        let hw = g.param(self.params.get(self.head_w));
        let hb = g.param(self.params.get(self.head_b));
        g.linear(features, hw, hb)
    }

    fn logits(&self, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::inference();
        let l = self.logits_graph(&mut g, ids);
        g.value(l).data().to_vec()
    }

    /// Probability distribution over the attribute's values.
    pub fn classify(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Input("cannot classify an empty sentence".into()));
        }
        Ok(softmax(&self.logits(ids)))
    }

    /// `log P(value | ids)`; an empty sequence is scored as padding.
    pub fn log_prob(&self, ids: &[usize], value: usize) -> f64 {
        log_softmax(&self.logits(ids))[value]
    }

    pub fn predict(&self, ids: &[usize]) -> usize {
        argmax(&self.logits(ids))
    }

    /// Fraction of examples whose argmax equals the label.
    pub fn accuracy(&self, examples: &[Example]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples.iter().filter(|(ids, y)| self.predict(ids) == *y).count();
        hits as f64 / examples.len() as f64
    }
}

/// Trains a classifier with cross-entropy; every value must occur in `train`.
pub fn train_classifier(
    attribute: &str,
    values: &[String],
    vocab_size: usize,
    train: &[Example],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<AttributeClassifier> {
    for (v, name) in values.iter().enumerate() {
        if !train.iter().any(|(_, y)| *y == v) {
            return Err(Error::LabelCoverage(format!("no training sentence labeled {attribute}={name}")));
        }
    }
    if let Some((_, y)) = train.iter().find(|(_, y)| *y >= values.len()) {
        return Err(Error::Input(format!("label {y} outside the {} values of `{attribute}`", values.len())));
    }
    let mut clf = AttributeClassifier::new(attribute, values, vocab_size, config.clone(), seed)?;
    let mut rng = seeded(seed ^ 0x5eed);
    let mut opt = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..Default::default() }, &clf.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        shuffle(&mut rng, &mut order);
        for chunk in order.chunks(config.batch_size) {
            let mut grads = clf.params.grad_buffer();
            for &i in chunk {
                let (ids, y) = &train[i];
                let mut g = Graph::training(Group::Classifier);
                let logits = clf.logits_graph(&mut g, ids);
                let loss = g.nll_sum(logits, &[*y]);
                g.backward(loss, 1.0 / chunk.len() as f64, &mut grads);
            }
            opt.step(&mut clf.params, &grads);
        }
    }
    if !clf.params.all_finite() {
        return Err(Error::Numerical(format!("classifier for `{attribute}` diverged")));
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LanguageModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LanguageModelConfig {
    fn default() -> Self {
        Self { layers: 1, hidden_dim: 32, heads: 2, ffn_dim: 64, max_len: 32, epochs: 4, batch_size: 32, learning_rate: 3e-3 }
    }
}

impl LanguageModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.layers, self.hidden_dim, self.heads, self.ffn_dim, self.max_len, self.batch_size].contains(&0) {
            return Err(Error::Config("language model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config("language model heads must divide hidden_dim".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("language model learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LmLayer {
    attention: AttentionSlots,
    norm1: NormSlots,
    ffn: FfnSlots,
    norm2: NormSlots,
}

/// Decoder-only causal transformer. The output projection starts at zero,
/// so an untrained model is exactly uniform over the vocabulary.
#[derive(Clone, Debug)]
pub struct FluencyLM {
    config: LanguageModelConfig,
    vocab_size: usize,
    params: ParamTable,
    embedding: usize,
    embed_norm: NormSlots,
    layers: Vec<LmLayer>,
    out_w: usize,
    out_b: usize,
    positions: Tensor,
}

impl FluencyLM {
    pub fn new(vocab_size: usize, config: LanguageModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let d = config.hidden_dim;
        let mut p = ParamTable::new(Group::Language);
        let embedding = p.add("embedding", xavier(&mut rng, vocab_size, d));
        let embed_norm = add_norm(&mut p, "embed_norm", d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LmLayer {
                attention: add_attention(&mut p, &mut rng, &format!("layer{l}.attn"), d),
                norm1: add_norm(&mut p, &format!("layer{l}.norm1"), d),
                ffn: add_ffn(&mut p, &mut rng, &format!("layer{l}.ffn"), d, config.ffn_dim),
                norm2: add_norm(&mut p, &format!("layer{l}.norm2"), d),
            });
        }
        let out_w = p.add("out.w", Tensor::zeros(d, vocab_size));
        let out_b = p.add("out.b", Tensor::zeros(1, vocab_size));
        Ok(Self { config, vocab_size, params: p, embedding, embed_norm, layers, out_w, out_b, positions: sinusoidal(config.max_len, d) })
    }

    pub fn config(&self) -> &LanguageModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn inputs_targets(&self, ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let keep = ids.len().min(self.config.max_len - 1);
        let ids: Vec<usize> = ids[..keep].iter().map(|&i| if i < self.vocab_size { i } else { crate::corpus::UNK }).collect();
        let input = core::iter::once(BOS).chain(ids.iter().copied()).collect();
        let target = ids.into_iter().chain(core::iter::once(EOS)).collect();
        (input, target)
    }

    /// Summed negative log-likelihood of `ids + <eos>` as a 1x1 node, plus the token count.
    pub fn nll_graph<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize]) -> (Var, usize) {
        let (input, target) = self.inputs_targets(ids);
        let p = &self.params;
        let x = embed_with_positions(g, p, self.embedding, &self.positions, &input);
        let mut h = norm(g, p, self.embed_norm, x);
        for l in &self.layers {
            let a = attention(g, p, l.attention, self.config.heads, h, h, true);
            let r = g.add(h, a);
            let r = norm(g, p, l.norm1, r);
            let f = ffn(g, p, l.ffn, r);
            let o = g.add(r, f);
            h = norm(g, p, l.norm2, o);
        }
        let w = g.param(p.get(self.out_w));
        let b = g.param(p.get(self.out_b));
        let logits = g.linear(h, w, b);
        (g.nll_sum(logits, &target), target.len())
    }

    /// `(Σ NLL, tokens)` over the sentence plus end-of-sequence.
    pub fn sentence_nll(&self, ids: &[usize]) -> Result<(f64, usize)> {
        if ids.is_empty() {
            return Err(Error::Input("cannot score an empty sentence".into()));
        }
        Ok(self.score(ids))
    }

    /// Like [`Self::sentence_nll`] but an empty sequence scores end-of-sequence alone.
    pub fn score(&self, ids: &[usize]) -> (f64, usize) {
        let mut g = Graph::inference();
        let (nll, n) = self.nll_graph(&mut g, ids);
        (g.value(nll).item(), n)
    }

    /// `exp(mean per-token NLL)`, end-of-sequence included.
    pub fn perplexity(&self, ids: &[usize]) -> Result<f64> {
        let (nll, n) = self.sentence_nll(ids)?;
        Ok(libm::exp(nll / n as f64))
    }
}

/// Trains the language model by next-token prediction; returns per-epoch mean NLL per token.
pub fn train_fluency_lm(lm: &mut FluencyLM, sentences: &[Vec<usize>], seed: u64) -> Result<Vec<f64>> {
    if sentences.is_empty() {
        return Err(Error::EmptySplit("no sentences for the language model".into()));
    }
    let cfg = lm.config;
    let mut rng = seeded(seed);
    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..Default::default() }, &lm.params);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        shuffle(&mut rng, &mut order);
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = lm.params.grad_buffer();
            for &i in chunk {
                let mut g = Graph::training(Group::Language);
                let (loss, n) = lm.nll_graph(&mut g, &sentences[i]);
                total += g.value(loss).item();
                tokens += n;
                g.backward(loss, 1.0 / (n * chunk.len()) as f64, &mut grads);
            }
            opt.step(&mut lm.params, &grads);
        }
        let mean = total / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical("language model loss diverged".into()));
        }
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn values(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    /// Label is decided by which marker token (5, 6 or 7) occurs.
    fn marker_data(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let y = i % 3;
                let mut ids: Vec<usize> = (0..5).map(|_| 8 + crate::init::below(&mut rng, 6)).collect();
                let pos = crate::init::below(&mut rng, ids.len());
                ids.insert(pos, 5 + y);
                (ids, y)
            })
            .collect()
    }

    #[test]
    fn probabilities_are_normalised() {
        let c = AttributeClassifier::new("voice", &values(2), 20, ClassifierConfig::default(), 1).unwrap();
        for ids in [vec![4], vec![4, 5, 6, 7, 8, 9, 10]] {
            let p = c.classify(&ids).unwrap();
            assert_eq!(p.len(), 2);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(c.classify(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn learns_marker_tokens_deterministically() {
        let train = marker_data(240, 1);
        let held = marker_data(60, 2);
        let cfg = ClassifierConfig { epochs: 4, ..Default::default() };
        let a = train_classifier("tense", &values(3), 16, &train, &cfg, 3).unwrap();
        let b = train_classifier("tense", &values(3), 16, &train, &cfg, 3).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.accuracy(&held) >= 0.95, "{}", a.accuracy(&held));
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let train: Vec<Example> = vec![(vec![4, 5], 0), (vec![6], 0)];
        let err = train_classifier("voice", &values(2), 10, &train, &ClassifierConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::LabelCoverage(_)), "{}", err.to_string());
    }

    #[test]
    fn untrained_lm_is_uniform() {
        let lm = FluencyLM::new(17, LanguageModelConfig::default(), 0).unwrap();
        let ppl = lm.perplexity(&[4, 5, 6]).unwrap();
        assert!((ppl - 17.0).abs() < 1e-9, "{ppl}");
    }

    #[test]
    fn single_token_perplexity_by_definition() {
        let mut lm = FluencyLM::new(9, LanguageModelConfig::default(), 0).unwrap();
        train_fluency_lm(&mut lm, &[vec![4, 5], vec![6]], 0).unwrap();
        let (nll, n) = lm.sentence_nll(&[6]).unwrap();
        assert_eq!(n, 2);
        assert!((lm.perplexity(&[6]).unwrap() - libm::exp(nll / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn trained_lm_prefers_real_order() {
        let sentences: Vec<Vec<usize>> = (0..60).map(|i| vec![4, 5 + i % 3, 8, 9, 10, 11]).collect();
        let mut lm = FluencyLM::new(12, LanguageModelConfig { epochs: 6, ..Default::default() }, 1).unwrap();
        let hist = train_fluency_lm(&mut lm, &sentences, 2).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let real = lm.perplexity(&[4, 5, 8, 9, 10, 11]).unwrap();
        let shuffled = lm.perplexity(&[11, 9, 4, 10, 5, 8]).unwrap();
        assert!(real < shuffled, "{real} vs {shuffled}");
        assert_eq!(lm.perplexity(&[4, 5, 8]).unwrap(), lm.perplexity(&[4, 5, 8]).unwrap());
    }
}
