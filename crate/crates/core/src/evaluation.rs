//! Automatic evaluation: per-attribute transfer accuracy, an embedding
//! matching content score, perplexity and the G-score.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::auxmodels::{AttributeClassifier, FluencyLM};
use crate::backbone::{BackboneModel, DecodeMode};
use crate::composition::{AdaptedModel, CompositionPlan, Route, StackSelection, TransferDirective};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::seeded;
use crate::tensor::{dot, softmax, Tensor};
use crate::training::{check_classifiers, TrainExample};

/// Percentage of `(output, target)` pairs the classifier assigns to the target.
pub fn transfer_accuracy(classifier: &AttributeClassifier, outputs: &[(Vec<usize>, usize)]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Input("no outputs to score".into()));
    }
    let hits = outputs.iter().filter(|(ids, y)| classifier.predict(ids) == *y).count();
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

/// `(mean(acc) · bs / ppl)^(1/3)` with accuracies in percent.
pub fn g_score(acc: &[f64], bs: f64, ppl: f64) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::Input("g_score needs at least one accuracy".into()));
    }
    if !(ppl > 0.0) {
        return Err(Error::Domain(format!("perplexity must be positive, got {ppl}")));
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    Ok(libm::cbrt(mean * bs / ppl))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(0.0, 1.0)
}

/// Greedy-matching F1 between two sets of token embeddings, with cosine
/// similarities clamped to `[0, 1]`.
pub fn greedy_match_f1(source: &Tensor, output: &Tensor) -> f64 {
    let sim: Vec<Vec<f64>> = (0..output.rows())
        .map(|i| (0..source.rows()).map(|j| cosine(output.row(i), source.row(j))).collect())
        .collect();
    let precision = sim.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).sum::<f64>() / output.rows() as f64;
    let recall = (0..source.rows())
        .map(|j| sim.iter().map(|r| r[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / source.rows() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Content preservation between `source` and `output` using contextual
/// embeddings from the bare (adapter-free) backbone encoder.
pub fn content_score(encoder: &BackboneModel, source: &[usize], output: &[usize]) -> Result<f64> {
    if source.is_empty() || output.is_empty() {
        return Err(Error::Input("content score needs two non-empty sentences".into()));
    }
    encoder.check_tokens(source)?;
    encoder.check_tokens(output)?;
    let embed = |ids: &[usize]| {
        let mut g = Graph::inference();
        let v = encoder.encode_graph(&mut g, ids);
        g.value(v).clone()
    };
    if source == output {
        return Ok(1.0);
    }
    Ok(greedy_match_f1(&embed(source), &embed(output)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PplAggregation {
    /// Mean of per-sentence perplexities.
    #[default]
    SentenceMean,
    /// `exp(Σ NLL / Σ tokens)` over the whole set.
    TokenWeighted,
}

impl PplAggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            PplAggregation::SentenceMean => "sentence_mean",
            PplAggregation::TokenWeighted => "token_weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sentence_mean" => Ok(Self::SentenceMean),
            "token_weighted" => Ok(Self::TokenWeighted),
            other => Err(Error::Config(format!("unknown perplexity aggregation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub max_len: usize,
    pub ppl_aggregation: PplAggregation,
    /// Cap on evaluated source sentences (all when `None`).
    pub max_sentences: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_len: 20, ppl_aggregation: PplAggregation::SentenceMean, max_sentences: None }
    }
}

/// Classifier decision on one output for one attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub attribute: String,
    pub target: String,
    pub predicted: String,
    pub probability: f64,
    /// Whether the directive changes this attribute.
    pub transfer: bool,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.target == self.predicted
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub source: String,
    pub directive: TransferDirective,
    pub stream: String,
    pub output: String,
    pub predictions: Vec<Prediction>,
    pub content: f64,
    pub ppl: f64,
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeAccuracy {
    pub attribute: String,
    /// Percent; `None` when no directive changed this attribute.
    pub acc: Option<f64>,
    pub count: usize,
}

/// Transfer accuracy of one stream: the share of its rows whose changed
/// attributes are all classified as the target.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamAccuracy {
    pub stream: String,
    pub acc: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub plan: String,
    pub accuracy: Vec<AttributeAccuracy>,
    /// In order of first appearance in the rows.
    pub streams: Vec<StreamAccuracy>,
    /// Percent of rows where every attribute matches the directive (Stack runs).
    pub joint_accuracy: Option<f64>,
    pub content: f64,
    pub ppl: f64,
    pub ppl_aggregation: PplAggregation,
    pub g: f64,
    pub rows: usize,
    pub sources: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

/// Aggregates rows into a summary; [`evaluate`] uses this, so a report can
/// be recomputed from its serialized rows.
pub fn summarize(rows: &[EvalRow], plan: &str, attributes: &[String], aggregation: PplAggregation, joint: bool) -> Result<EvalSummary> {
    if rows.is_empty() {
        return Err(Error::Input("no evaluation rows".into()));
    }
    let accuracy: Vec<AttributeAccuracy> = attributes
        .iter()
        .map(|a| {
            let scored: Vec<bool> = rows
                .iter()
                .flat_map(|r| r.predictions.iter())
                .filter(|p| p.transfer && &p.attribute == a)
                .map(Prediction::correct)
                .collect();
            AttributeAccuracy {
                attribute: a.clone(),
                acc: if scored.is_empty() { None } else { Some(100.0 * scored.iter().filter(|c| **c).count() as f64 / scored.len() as f64) },
                count: scored.len(),
            }
        })
        .collect();
    let mut streams: Vec<StreamAccuracy> = Vec::new();
    for r in rows {
        let hit = r.predictions.iter().filter(|p| p.transfer).all(Prediction::correct);
        let slot = match streams.iter().position(|s| s.stream == r.stream) {
            Some(i) => i,
            None => {
                streams.push(StreamAccuracy { stream: r.stream.clone(), acc: 0.0, count: 0 });
                streams.len() - 1
            }
        };
        streams[slot].count += 1;
        streams[slot].acc += f64::from(u8::from(hit));
    }
    for s in &mut streams {
        s.acc = 100.0 * s.acc / s.count as f64;
    }
    let joint_accuracy = joint.then(|| 100.0 * rows.iter().filter(|r| r.predictions.iter().all(Prediction::correct)).count() as f64 / rows.len() as f64);
    let n = rows.len() as f64;
    let content = rows.iter().map(|r| r.content).sum::<f64>() / n;
    let ppl = match aggregation {
        PplAggregation::SentenceMean => rows.iter().map(|r| r.ppl).sum::<f64>() / n,
        PplAggregation::TokenWeighted => {
            libm::exp(rows.iter().map(|r| r.nll).sum::<f64>() / rows.iter().map(|r| r.tokens).sum::<usize>() as f64)
        }
    };
    let accs: Vec<f64> = accuracy.iter().filter_map(|a| a.acc).collect();
    let g = g_score(&accs, content, ppl)?;
    let mut sources: Vec<usize> = rows.iter().map(|r| r.index).collect();
    sources.dedup();
    Ok(EvalSummary {
        plan: plan.into(),
        accuracy,
        streams,
        joint_accuracy,
        content,
        ppl,
        ppl_aggregation: aggregation,
        g,
        rows: rows.len(),
        sources: sources.len(),
    })
}

/// Runs transfer over `test` and scores every output.
///
/// Parallel plans produce one row per stream whose value differs from the
/// source label. Stack plans produce one row per value combination other
/// than the source's own labels.
pub fn evaluate(
    model: &AdaptedModel,
    vocab: &Vocabulary,
    test: &[TrainExample],
    classifiers: &[AttributeClassifier],
    lm: &FluencyLM,
    config: &EvalConfig,
) -> Result<EvalReport> {
    check_classifiers(model, classifiers)?;
    let vsize = model.backbone.config().vocab_size;
    if vocab.len() != vsize || lm.vocab_size() != vsize {
        return Err(Error::Load("evaluation models use different vocabularies".into()));
    }
    let schema = &model.schema;
    let test = &test[..config.max_sentences.unwrap_or(test.len()).min(test.len())];
    if test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let routes = match &model.plan {
        CompositionPlan::Parallel(_) => model.routes(None)?,
        CompositionPlan::Stack(_) => model.routes(Some(&StackSelection::AllCombinations))?,
    };
    // (attribute, value) per route entry
    let targets: Vec<Vec<(usize, usize)>> = routes
        .iter()
        .map(|r| {
            r.assignment
                .iter()
                .map(|v| schema.find_value(v).map(|x| (x.attribute, x.value)).ok_or_else(|| Error::Config(format!("unknown value `{v}`"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let joint = model.plan.is_stack();
    let mut rng = seeded(0);
    let mut rows = Vec::new();
    for (index, ex) in test.iter().enumerate() {
        model.backbone.check_tokens(&ex.ids)?;
        let selected: Vec<usize> = (0..routes.len())
            .filter(|&k| {
                if joint {
                    targets[k].iter().any(|&(a, v)| ex.labels[a] != v)
                } else {
                    targets[k].iter().all(|&(a, v)| ex.labels[a] != v)
                }
            })
            .collect();
        if selected.is_empty() {
            continue;
        }
        let mut g = Graph::inference();
        let chosen: Vec<Route> = selected.iter().map(|&k| routes[k].clone()).collect();
        let memories = model.encode_streams_graph(&mut g, &ex.ids, &chosen);
        for (i, &k) in selected.iter().enumerate() {
            let memory = g.value(memories[i]).clone();
            let out = model.generate_one(&memory, &routes[k], DecodeMode::Greedy, config.max_len, &mut rng)?;
            let output = out.content().to_vec();
            let predictions = targets[k]
                .iter()
                .map(|&(a, v)| {
                    let probs = softmax_or_pad(&classifiers[a], &output);
                    let pred = crate::tensor::argmax(&probs);
                    let attr = &schema.attributes()[a];
                    Prediction {
                        attribute: attr.name.clone(),
                        target: attr.values[v].clone(),
                        predicted: attr.values[pred].clone(),
                        probability: probs[pred],
                        transfer: ex.labels[a] != v,
                    }
                })
                .collect();
            let content = if output.is_empty() { 0.0 } else { content_score(&model.backbone, &ex.ids, &output)? };
            let (nll, tokens) = lm.score(&output);
            let directive = TransferDirective::new(targets[k].iter().map(|&(a, v)| {
                let attr = &schema.attributes()[a];
                (attr.name.clone(), attr.values[v].clone())
            }));
            rows.push(EvalRow {
                index,
                source: vocab.decode(&ex.ids).join(" "),
                directive,
                stream: routes[k].tag(),
                output: vocab.decode(&output).join(" "),
                predictions,
                content,
                ppl: libm::exp(nll / tokens as f64),
                nll,
                tokens,
            });
        }
    }
    let attributes: Vec<String> = schema.attributes().iter().map(|a| a.name.clone()).collect();
    let summary = summarize(&rows, &model.plan.to_string(), &attributes, config.ppl_aggregation, joint)?;
    Ok(EvalReport { rows, summary })
}

fn softmax_or_pad(c: &AttributeClassifier, ids: &[usize]) -> Vec<f64> {
    match c.classify(ids) {
        Ok(p) => p,
        Err(_) => {
            let n = c.values().len();
            let lp: Vec<f64> = (0..n).map(|v| c.log_prob(ids, v)).collect();
            softmax(&lp)
        }
    }
}

/// CSV rendering of a summary: header plus one data row.
pub fn summary_csv(summary: &EvalSummary) -> String {
    let mut header: Vec<String> = vec!["plan".into()];
    let mut row: Vec<String> = vec![format!("\"{}\"", summary.plan)];
    for a in &summary.accuracy {
        header.push(format!("acc_{}", a.attribute));
        row.push(a.acc.map_or(String::new(), |v| format!("{v:.1}")));
    }
    if let Some(j) = summary.joint_accuracy {
        header.push("acc_joint".into());
        row.push(format!("{j:.1}"));
    }
    header.extend(["bs", "ppl", "g"].map(ToString::to_string));
    row.push(format!("{:.2}", summary.content));
    row.push(format!("{:.1}", summary.ppl));
    row.push(format!("{:.2}", summary.g));
    format!("{}\n{}\n", header.join(","), row.join(","))
}
