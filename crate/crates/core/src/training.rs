//! Adapter training: teacher-forced reconstruction on the stream whose value
//! matches the sentence, policy-gradient classifier loss on every other
//! stream, mixed as `(1 − λ)·L_rec + λ·L_cls`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::auxmodels::AttributeClassifier;
use crate::backbone::{DecodeMode, Generated};
use crate::composition::{AdaptedModel, Route};
use crate::corpus::{ValueRef, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Var};
use crate::init::{seeded, shuffle, SeededRng};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Weight of the classifier loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sampled sequences per transfer stream and sentence.
    pub samples_per_stream: usize,
    pub baseline_decay: f64,
    /// Subtract a running reward baseline (variance reduction).
    pub use_baseline: bool,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Sampling temperature; the surrogate uses the same tempered distribution.
    pub temperature: f64,
    /// Longest sampled sequence, end-of-sequence included.
    pub max_len: usize,
    /// Cap on training sentences visited per epoch (all when `None`).
    pub sentences_per_epoch: Option<usize>,
    /// Reward given to degenerate samples in place of the classifier score:
    /// empty ones and ones that hit `max_len` without an end-of-sequence.
    /// `None` scores them like any other sample.
    pub degenerate_reward: Option<f64>,
    /// Also give that reward to samples that repeat a token back to back or
    /// a bigram anywhere.
    pub floor_repeats: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.95,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 16,
            samples_per_stream: 2,
            baseline_decay: 0.99,
            use_baseline: true,
            seed: 0,
            clip_norm: Some(1.0),
            temperature: 1.0,
            max_len: 20,
            sentences_per_epoch: Some(500),
            degenerate_reward: Some(-20.0),
            floor_repeats: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.samples_per_stream == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("samples_per_stream, batch_size and max_len must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("learning_rate and temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline_decay must lie in [0, 1), got {}", self.baseline_decay)));
        }
        if self.degenerate_reward.is_some_and(|r| !r.is_finite()) {
            return Err(Error::Config("degenerate_reward must be finite".into()));
        }
        Ok(())
    }
}

/// `(1 − λ)·rec + λ·cls`.
pub fn joint_loss(rec: f64, cls: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok((1.0 - lambda) * rec + lambda * cls)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamLoss {
    pub value: String,
    pub rec: Option<f64>,
    pub cls: Option<f64>,
    pub mean_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cls: f64,
    pub total: f64,
    pub per_stream: Vec<StreamLoss>,
}

/// A sampled transfer `x'` with its originating stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub stream: usize,
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl From<(usize, Generated)> for SampledSequence {
    fn from((stream, g): (usize, Generated)) -> Self {
        Self { stream, tokens: g.tokens, log_probs: g.log_probs }
    }
}

/// Per-stream exponential moving average of rewards, initialised to the
/// first batch mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBaseline {
    decay: f64,
    values: Vec<Option<f64>>,
}

impl RewardBaseline {
    pub fn new(streams: usize, decay: f64) -> Self {
        Self { decay, values: vec![None; streams] }
    }

    pub fn get(&self, stream: usize) -> Option<f64> {
        self.values[stream]
    }

    /// Baseline to use for the current batch, initialising from `batch_mean` if unset.
    pub fn current(&mut self, stream: usize, batch_mean: f64) -> f64 {
        *self.values[stream].get_or_insert(batch_mean)
    }

    pub fn update(&mut self, stream: usize, batch_mean: f64) {
        let v = self.values[stream].get_or_insert(batch_mean);
        *v = self.decay * *v + (1.0 - self.decay) * batch_mean;
    }
}

/// A sample that ended with end-of-sequence and has content.
pub fn is_complete(sample: &Generated) -> bool {
    sample.tokens.last() == Some(&EOS) && !sample.content().is_empty()
}

/// Some token follows an identical token, or some bigram occurs twice.
pub fn has_repeat(sample: &Generated) -> bool {
    let t = sample.content();
    t.windows(2).enumerate().any(|(i, w)| w[0] == w[1] || t[i + 1..].windows(2).skip(1).any(|v| v == w))
}

/// Mean per-token NLL of `target + <eos>` decoded from `memory` along `route`.
pub fn reconstruction_graph<'a>(model: &'a AdaptedModel, g: &mut Graph<'a>, memory: Var, route: &Route, target: &[usize]) -> Var {
    let prefix: Vec<usize> = core::iter::once(BOS).chain(target.iter().copied()).collect();
    let gold: Vec<usize> = target.iter().copied().chain(core::iter::once(EOS)).collect();
    let logits = model.decode_stream_graph(g, &prefix, memory, route);
    let nll = g.nll_sum(logits, &gold);
    g.scale(nll, 1.0 / gold.len() as f64)
}

/// Negative summed log-probability of `tokens` under the tempered decoder.
pub fn sequence_nll_graph<'a>(model: &'a AdaptedModel, g: &mut Graph<'a>, memory: Var, route: &Route, tokens: &[usize], temperature: f64) -> Var {
    let prefix: Vec<usize> = core::iter::once(BOS).chain(tokens[..tokens.len() - 1].iter().copied()).collect();
    let logits = model.decode_stream_graph(g, &prefix, memory, route);
    let logits = if temperature == 1.0 { logits } else { g.scale(logits, 1.0 / temperature) };
    g.nll_sum(logits, tokens)
}

/// REINFORCE surrogate for one sample: `−(r − b)·log P(x') = (r − b)·NLL(x')`.
/// The reward is a constant; the gradient flows through `nll` only.
pub fn policy_gradient_term<'a>(g: &mut Graph<'a>, nll: Var, reward: f64, baseline: f64) -> Var {
    g.scale(nll, reward - baseline)
}

/// `L_rec` of `sentence` on stream `stream`, which must carry one of the sentence's labels.
pub fn reconstruction_loss(model: &AdaptedModel, stream: usize, sentence: &[usize], labels: &[usize]) -> Result<f64> {
    let routes = model.routes(None)?;
    let refs = stream_values(model, &routes)?;
    let r = refs.get(stream).ok_or_else(|| Error::Routing(format!("no stream {stream}")))?;
    if labels.get(r.attribute) != Some(&r.value) {
        return Err(Error::Contract(format!(
            "stream `{}` does not match the sentence's labels; reconstruction applies to matching streams only",
            routes[stream].tag()
        )));
    }
    model.backbone.check_tokens(sentence)?;
    let mut g = Graph::inference();
    let memories = model.encode_streams_graph(&mut g, sentence, &routes);
    let loss = reconstruction_graph(model, &mut g, memories[stream], &routes[stream], sentence);
    Ok(g.value(loss).item())
}

fn stream_values(model: &AdaptedModel, routes: &[Route]) -> Result<Vec<ValueRef>> {
    routes
        .iter()
        .map(|r| {
            let [v] = r.assignment.as_slice() else {
                return Err(Error::Config("training needs a Parallel plan; Stack is inference-only".into()));
            };
            model.schema.find_value(v).ok_or_else(|| Error::Config(format!("unknown value `{v}`")))
        })
        .collect()
}

/// Checks that `classifiers[a]` scores attribute `a` of the model's schema.
pub fn check_classifiers(model: &AdaptedModel, classifiers: &[AttributeClassifier]) -> Result<()> {
    let attrs = model.schema.attributes();
    if classifiers.len() != attrs.len() {
        return Err(Error::Load(format!("{} classifiers for {} attributes", classifiers.len(), attrs.len())));
    }
    for (c, a) in classifiers.iter().zip(attrs) {
        if c.attribute() != a.name || c.values() != a.values.as_slice() {
            return Err(Error::Load(format!("classifier for `{}` does not match attribute `{}`", c.attribute(), a.name)));
        }
        if c.vocab_size() != model.backbone.config().vocab_size {
            return Err(Error::Load(format!(
                "classifier for `{}` uses a vocabulary of {} tokens, model has {}",
                a.name,
                c.vocab_size(),
                model.backbone.config().vocab_size
            )));
        }
    }
    Ok(())
}

/// A training sentence: token ids and one value index per attribute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    /// Greedy transfer accuracy of every stream on the probe set.
    pub probe_accuracy: Vec<(String, f64)>,
    pub backbone_checksum: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
}

/// Greedy transfer accuracy of every stream over the probe sentences whose
/// label differs from the stream's value.
pub fn probe_accuracy(model: &AdaptedModel, classifiers: &[AttributeClassifier], probe: &[TrainExample], max_len: usize) -> Result<Vec<(String, f64)>> {
    let routes = model.routes(None)?;
    let refs = stream_values(model, &routes)?;
    let mut hits = vec![0usize; routes.len()];
    let mut totals = vec![0usize; routes.len()];
    let mut rng = seeded(0);
    for ex in probe {
        let mut g = Graph::inference();
        let memories = model.encode_streams_graph(&mut g, &ex.ids, &routes);
        for (k, r) in refs.iter().enumerate() {
            if ex.labels[r.attribute] == r.value {
                continue;
            }
            let memory = g.value(memories[k]).clone();
            let out = model.generate_one(&memory, &routes[k], DecodeMode::Greedy, max_len, &mut rng)?;
            totals[k] += 1;
            if classifiers[r.attribute].predict(out.content()) == r.value {
                hits[k] += 1;
            }
        }
    }
    Ok(routes
        .iter()
        .enumerate()
        .map(|(k, r)| (r.tag(), if totals[k] == 0 { 0.0 } else { hits[k] as f64 / totals[k] as f64 }))
        .collect())
}

struct Drawn {
    stream: usize,
    sample: Generated,
    reward: f64,
}

/// Trains the adapter banks of `model` in place. `on_epoch` sees every
/// log record as soon as it is produced.
pub fn train(
    model: &mut AdaptedModel,
    data: &[TrainExample],
    classifiers: &[AttributeClassifier],
    config: &TrainingConfig,
    probe: &[TrainExample],
    on_epoch: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.plan.is_stack() {
        return Err(Error::Config("Stack plans are inference-only and cannot be trained".into()));
    }
    if !model.backbone.is_frozen() {
        return Err(Error::Contract("the backbone must be frozen before adapter training".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    check_classifiers(model, classifiers)?;
    let routes = model.routes(None)?;
    let refs = stream_values(model, &routes)?;
    for ex in data {
        model.backbone.check_tokens(&ex.ids)?;
        if ex.labels.len() != model.schema.len() {
            return Err(Error::Input("training example has the wrong number of labels".into()));
        }
    }

    let before = model.backbone.checksum();
    let mut rng = seeded(config.seed);
    let mut opt = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, clip_norm: config.clip_norm, ..Default::default() },
        model.banks.params(),
    );
    let mut baseline = RewardBaseline::new(routes.len(), config.baseline_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = config.sentences_per_epoch.unwrap_or(data.len()).min(data.len());
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle(&mut rng, &mut order);
        let mut sums = EpochSums::new(routes.len());
        for chunk in order[..per_epoch].chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
            let step = train_step(model, &routes, &refs, classifiers, config, &batch, &mut baseline, &mut rng)?;
            sums.add(&step);
            let grads = step.grads;
            opt.step(model.banks.params_mut(), &grads);
            if !model.banks.params().all_finite() {
                return Err(Error::Numerical("adapter parameters became non-finite".into()));
            }
        }
        let loss = sums.breakdown(&routes, config.lambda)?;
        let record = LogRecord {
            epoch: epoch + 1,
            step: opt.steps(),
            loss,
            probe_accuracy: probe_accuracy(model, classifiers, probe, config.max_len)?,
            backbone_checksum: model.backbone.checksum(),
        };
        on_epoch(&record);
        log.push(record);
    }
    let after = model.backbone.checksum();
    Ok(TrainOutcome { log, backbone_checksum_before: before, backbone_checksum_after: after })
}

struct StepResult {
    grads: crate::graph::GradBuffer,
    sentences: usize,
    /// Per stream: (Σ rec over sentences, count), (Σ surrogate, count), (Σ reward, count).
    rec: Vec<(f64, usize)>,
    cls: Vec<(f64, usize)>,
    reward: Vec<(f64, usize)>,
    /// Σ over sentences of the per-sentence L_rec, L_cls.
    rec_total: f64,
    cls_total: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &AdaptedModel,
    routes: &[Route],
    refs: &[ValueRef],
    classifiers: &[AttributeClassifier],
    config: &TrainingConfig,
    batch: &[&TrainExample],
    baseline: &mut RewardBaseline,
    rng: &mut SeededRng,
) -> Result<StepResult> {
    let k = routes.len();
    let use_cls = config.lambda > 0.0;
    let mode = DecodeMode::Sample { temperature: config.temperature };

    // Draw every sample of the batch first so the baseline sees the whole batch.
    let mut drawn: Vec<Vec<Drawn>> = Vec::with_capacity(batch.len());
    if use_cls {
        for ex in batch {
            let mut g = Graph::inference();
            let memories = model.encode_streams_graph(&mut g, &ex.ids, routes);
            let mut mine = Vec::new();
            for (s, r) in refs.iter().enumerate() {
                if ex.labels[r.attribute] == r.value {
                    continue;
                }
                let memory = g.value(memories[s]).clone();
                for _ in 0..config.samples_per_stream {
                    let sample = model.generate_one(&memory, &routes[s], mode, config.max_len, rng)?;
                    let reward = match config.degenerate_reward {
                        Some(floor) if !is_complete(&sample) || (config.floor_repeats && has_repeat(&sample)) => floor,
                        _ => classifiers[r.attribute].log_prob(sample.content(), r.value),
                    };
                    mine.push(Drawn { stream: s, sample, reward });
                }
            }
            drawn.push(mine);
        }
    } else {
        drawn.resize_with(batch.len(), Vec::new);
    }
    let mut reward = vec![(0.0, 0usize); k];
    for d in drawn.iter().flatten() {
        reward[d.stream].0 += d.reward;
        reward[d.stream].1 += 1;
    }
    let mut b = vec![0.0; k];
    if config.use_baseline {
        for s in 0..k {
            if reward[s].1 > 0 {
                b[s] = baseline.current(s, reward[s].0 / reward[s].1 as f64);
            }
        }
    }

    let mut grads = model.banks.params().grad_buffer();
    let mut rec = vec![(0.0, 0usize); k];
    let mut cls = vec![(0.0, 0usize); k];
    let (mut rec_total, mut cls_total) = (0.0, 0.0);
    for (ex, samples) in batch.iter().zip(&drawn) {
        let mut g = Graph::training(Group::Adapters);
        let memories = model.encode_streams_graph(&mut g, &ex.ids, routes);
        let mut rec_terms = Vec::new();
        for (s, r) in refs.iter().enumerate() {
            if ex.labels[r.attribute] == r.value {
                let l = reconstruction_graph(model, &mut g, memories[s], &routes[s], &ex.ids);
                rec[s].0 += g.value(l).item();
                rec[s].1 += 1;
                rec_terms.push(l);
            }
        }
        // per stream: mean over its samples
        let mut cls_terms = Vec::new();
        for s in 0..k {
            let mine: Vec<&Drawn> = samples.iter().filter(|d| d.stream == s).collect();
            if mine.is_empty() {
                continue;
            }
            let mut acc: Option<Var> = None;
            for d in &mine {
                let nll = sequence_nll_graph(model, &mut g, memories[s], &routes[s], &d.sample.tokens, config.temperature);
                let term = policy_gradient_term(&mut g, nll, d.reward, b[s]);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            let stream_loss = g.scale(acc.expect("non-empty"), 1.0 / mine.len() as f64);
            cls[s].0 += g.value(stream_loss).item();
            cls[s].1 += 1;
            cls_terms.push(stream_loss);
        }
        let mean = |g: &mut Graph<'_>, terms: &[Var]| -> Option<Var> {
            let (&first, rest) = terms.split_first()?;
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t);
            }
            Some(g.scale(acc, 1.0 / terms.len() as f64))
        };
        let rec_mean = mean(&mut g, &rec_terms);
        let cls_mean = mean(&mut g, &cls_terms);
        let mut total: Option<Var> = None;
        if let Some(r) = rec_mean {
            rec_total += g.value(r).item();
            if config.lambda < 1.0 {
                total = Some(g.scale(r, 1.0 - config.lambda));
            }
        }
        if let Some(c) = cls_mean {
            cls_total += g.value(c).item();
            let c = g.scale(c, config.lambda);
            total = Some(match total {
                Some(t) => g.add(t, c),
                None => c,
            });
        }
        if let Some(t) = total {
            g.backward(t, 1.0 / batch.len() as f64, &mut grads);
        }
    }
    if config.use_baseline {
        for s in 0..k {
            if reward[s].1 > 0 {
                baseline.update(s, reward[s].0 / reward[s].1 as f64);
            }
        }
    }
    Ok(StepResult { grads, sentences: batch.len(), rec, cls, reward, rec_total, cls_total })
}

struct EpochSums {
    sentences: usize,
    rec: Vec<(f64, usize)>,
    cls: Vec<(f64, usize)>,
    reward: Vec<(f64, usize)>,
    rec_total: f64,
    cls_total: f64,
}

impl EpochSums {
    fn new(k: usize) -> Self {
        Self { sentences: 0, rec: vec![(0.0, 0); k], cls: vec![(0.0, 0); k], reward: vec![(0.0, 0); k], rec_total: 0.0, cls_total: 0.0 }
    }

    fn add(&mut self, s: &StepResult) {
        self.sentences += s.sentences;
        for (dst, src) in [(&mut self.rec, &s.rec), (&mut self.cls, &s.cls), (&mut self.reward, &s.reward)] {
            for (a, b) in dst.iter_mut().zip(src) {
                a.0 += b.0;
                a.1 += b.1;
            }
        }
        self.rec_total += s.rec_total;
        self.cls_total += s.cls_total;
    }

    fn breakdown(&self, routes: &[Route], lambda: f64) -> Result<LossBreakdown> {
        let n = self.sentences.max(1) as f64;
        let avg = |(s, c): (f64, usize)| if c == 0 { None } else { Some(s / c as f64) };
        let rec = self.rec_total / n;
        let cls = self.cls_total / n;
        Ok(LossBreakdown {
            rec,
            cls,
            total: joint_loss(rec, cls, lambda)?,
            per_stream: routes
                .iter()
                .enumerate()
                .map(|(k, r)| StreamLoss { value: r.tag(), rec: avg(self.rec[k]), cls: avg(self.cls[k]), mean_reward: avg(self.reward[k]) })
                .collect(),
        })
    }
}
