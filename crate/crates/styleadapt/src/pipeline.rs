//! The staged pipeline behind the command-line tool. Every stage reads its
//! inputs from and writes its artifacts under one run root.

use std::path::{Path, PathBuf};

use serde::Serialize;
use styleadapt_core::adapters::{count_adapter_params, AdapterBanks, AdapterConfig};
use styleadapt_core::auxmodels::{train_classifier, train_fluency_lm, AttributeClassifier, Example, FluencyLM};
use styleadapt_core::backbone::{pretrain_denoising, BackboneConfig, BackboneModel, DecodeMode};
use styleadapt_core::composition::{inject_adapters, AdaptedModel, CompositionPlan, StackSelection, TransferDirective};
use styleadapt_core::corpus::{generate_synthetic_corpus, tokenize, AttributeSchema, CorpusSplit, LabeledSentence, SplitRatios, Vocabulary};
use styleadapt_core::evaluation::{evaluate as run_eval, summary_csv, EvalReport};
use styleadapt_core::training::{train as run_training, TrainExample};

use crate::checkpoint::{
    adapter_checkpoint, backbone_checkpoint, classifier_checkpoint, lm_checkpoint, load_adapters, load_backbone, load_classifier, load_lm,
};
use crate::config::RunConfig;
use crate::corpus_io::{load_corpus, save_corpus, write_file, write_tsv_layout};
use crate::error::{codes, CliError, Result};
use crate::report::{log_jsonl, write_report, SummaryLine};

/// Environment variable naming the run root when `--root` is not given.
pub const ROOT_ENV: &str = "STYLEADAPT_ROOT";
pub const DEFAULT_ROOT: &str = "runs";

/// Backbone size the reference-scale report is quoted against.
pub const REFERENCE_BACKBONE: usize = 406_000_000;

/// Artifact locations under a run root.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn tsv(&self) -> PathBuf {
        self.root.join("data").join("tsv")
    }
    pub fn backbone(&self) -> PathBuf {
        self.root.join("aux").join("backbone.json")
    }
    /// Classifier that provides the training reward.
    pub fn guide_classifier(&self, attribute: &str) -> PathBuf {
        self.root.join("aux").join(format!("classifier.{attribute}.json"))
    }
    /// Independently seeded classifier used only for evaluation.
    pub fn eval_classifier(&self, attribute: &str) -> PathBuf {
        self.root.join("aux").join(format!("eval-classifier.{attribute}.json"))
    }
    pub fn lm(&self) -> PathBuf {
        self.root.join("aux").join("lm.json")
    }
    pub fn aux_report(&self) -> PathBuf {
        self.root.join("aux").join("report.json")
    }
    pub fn adapters(&self) -> PathBuf {
        self.root.join("adapters").join("adapters.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("adapters").join("train_log.jsonl")
    }
    pub fn eval_report(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.jsonl"))
    }
    pub fn eval_csv(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.csv"))
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::StageOrder { artifact: path.display().to_string(), stage })
    }
}

/// Seed offsets so that every stage draws from its own stream.
mod seeds {
    pub const BACKBONE_INIT: u64 = 1;
    pub const DENOISE: u64 = 2;
    pub const GUIDE: u64 = 10;
    pub const EVAL: u64 = 20;
    pub const LM: u64 = 30;
    pub const ADAPTERS: u64 = 40;
    pub const TRAIN: u64 = 50;
}

fn offset(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataOutcome {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

pub fn build_corpus(config: &RunConfig) -> Result<CorpusSplit> {
    let schema = config.schema()?;
    let ratios = SplitRatios { dev: config.corpus.dev_ratio, test: config.corpus.test_ratio };
    Ok(generate_synthetic_corpus(&schema, &config.template_bank()?, config.corpus.size, config.seed, ratios)?)
}

pub fn gen_data(config: &RunConfig, paths: &Paths) -> Result<GenDataOutcome> {
    let corpus = build_corpus(config)?;
    save_corpus(&paths.data(), &corpus)?;
    write_tsv_layout(&paths.tsv(), &corpus)?;
    let (train, dev, test) = corpus.sizes();
    Ok(GenDataOutcome { train, dev, test })
}

fn read_corpus(config: &RunConfig, paths: &Paths) -> Result<CorpusSplit> {
    let data = paths.data();
    require(&data.join("train.jsonl"), "gen-data")?;
    load_corpus(&data, &config.schema()?)
}

pub fn to_examples(vocab: &Vocabulary, sentences: &[LabeledSentence]) -> Vec<TrainExample> {
    sentences.iter().map(|s| TrainExample { ids: vocab.encode(&s.tokens), labels: s.labels.clone() }).collect()
}

fn attribute_examples(examples: &[TrainExample], attribute: usize) -> Vec<Example> {
    examples.iter().map(|e| (e.ids.clone(), e.labels[attribute])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ClassifierScore {
    pub attribute: String,
    /// Held-out (test split) accuracy in [0, 1].
    pub guide: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AuxOutcome {
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub denoise_loss: Vec<f64>,
    pub backbone_checksum: String,
    pub classifiers: Vec<ClassifierScore>,
    pub lm_loss: Vec<f64>,
    /// Sentence-mean perplexity of the held-out split under the language model.
    pub lm_test_ppl: f64,
}

/// Builds the vocabulary, pre-trains and freezes the backbone, and trains
/// the guidance classifiers, evaluation classifiers and language model.
pub fn pretrain_aux(config: &RunConfig, paths: &Paths) -> Result<AuxOutcome> {
    let corpus = read_corpus(config, paths)?;
    let schema = &corpus.schema;
    let vocab = Vocabulary::build(&corpus, config.corpus.min_count)?;
    let train = to_examples(&vocab, &corpus.train);
    let held = if corpus.test.is_empty() { &corpus.dev } else { &corpus.test };
    let held = to_examples(&vocab, held);
    let sentences: Vec<Vec<usize>> = train.iter().map(|e| e.ids.clone()).collect();

    let mut backbone = BackboneModel::build(config.backbone.to_core(vocab.len()), offset(config.seed, seeds::BACKBONE_INIT))?;
    let denoise_loss = pretrain_denoising(&mut backbone, &sentences, &config.denoise.to_core(offset(config.seed, seeds::DENOISE)))?;
    backbone.freeze();
    backbone_checkpoint(&backbone, &vocab).save(&paths.backbone())?;

    let mut classifiers = Vec::new();
    for (a, attr) in schema.attributes().iter().enumerate() {
        let data = attribute_examples(&train, a);
        let held = attribute_examples(&held, a);
        let mut score = ClassifierScore { attribute: attr.name.clone(), guide: 0.0, eval: 0.0 };
        for (base, path, slot) in [
            (seeds::GUIDE, paths.guide_classifier(&attr.name), &mut score.guide),
            (seeds::EVAL, paths.eval_classifier(&attr.name), &mut score.eval),
        ] {
            let c = train_classifier(&attr.name, &attr.values, vocab.len(), &data, &config.classifier.to_core(), offset(config.seed, base + a as u64))?;
            *slot = if held.is_empty() { c.accuracy(&data) } else { c.accuracy(&held) };
            classifier_checkpoint(&c, &vocab).save(&path)?;
        }
        classifiers.push(score);
    }

    let mut lm = FluencyLM::new(vocab.len(), config.lm.to_core(), offset(config.seed, seeds::LM))?;
    let lm_loss = train_fluency_lm(&mut lm, &sentences, offset(config.seed, seeds::LM + 1))?;
    let ppls = held.iter().map(|e| lm.perplexity(&e.ids)).collect::<styleadapt_core::Result<Vec<f64>>>()?;
    lm_checkpoint(&lm, &vocab).save(&paths.lm())?;

    let outcome = AuxOutcome {
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        denoise_loss,
        backbone_checksum: backbone.checksum(),
        classifiers,
        lm_loss,
        lm_test_ppl: if ppls.is_empty() { f64::NAN } else { ppls.iter().sum::<f64>() / ppls.len() as f64 },
    };
    write_file(&paths.aux_report(), (serde_json::to_string_pretty(&outcome).expect("aux report serializes") + "\n").as_bytes())?;
    Ok(outcome)
}

fn load_classifiers(schema: &AttributeSchema, vocab: &Vocabulary, path: impl Fn(&str) -> PathBuf) -> Result<Vec<AttributeClassifier>> {
    schema
        .attributes()
        .iter()
        .map(|a| {
            let p = path(&a.name);
            require(&p, "pretrain-aux")?;
            load_classifier(&p, vocab)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_probe_accuracy: Vec<(String, f64)>,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub adapter_checksum_before: String,
    pub adapter_checksum_after: String,
}

/// Trains one adapter bank per value of the training plan and saves them
/// with the training log.
pub fn train(config: &RunConfig, paths: &Paths) -> Result<TrainSummary> {
    let plan = config.train_plan()?;
    let schema = config.schema()?;
    let corpus = read_corpus(config, paths)?;
    require(&paths.backbone(), "pretrain-aux")?;
    let (backbone, vocab) = load_backbone(&paths.backbone())?;
    let classifiers = load_classifiers(&schema, &vocab, |a| paths.guide_classifier(a))?;
    let train = to_examples(&vocab, &corpus.train);
    let probe_src = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let probe = to_examples(&vocab, &probe_src[..config.training.probe_size.min(probe_src.len())]);

    let adapter_config = config.adapters.to_core(backbone.config());
    let banks = AdapterBanks::initialise(adapter_config, &plan.values(), offset(config.seed, seeds::ADAPTERS))?;
    let adapter_before = banks.params().checksum();
    let mut model = inject_adapters(backbone, banks, plan, schema)?;
    let tc = config.training.to_core(offset(config.seed, seeds::TRAIN));
    let mut seen = Vec::new();
    let log_path = paths.train_log();
    let outcome = run_training(&mut model, &train, &classifiers, &tc, &probe, &mut |r| {
        seen.push(r.clone());
        // flush after every epoch so a long run can be followed
        let _ = write_file(&log_path, log_jsonl(&seen).as_bytes());
    })?;
    write_file(&log_path, log_jsonl(&outcome.log).as_bytes())?;
    adapter_checkpoint(&model.banks, &vocab).save(&paths.adapters())?;
    let last = outcome.log.last();
    Ok(TrainSummary {
        epochs: outcome.log.len(),
        final_loss: last.map_or(f64::NAN, |r| r.loss.total),
        final_probe_accuracy: last.map(|r| r.probe_accuracy.clone()).unwrap_or_default(),
        backbone_checksum_before: outcome.backbone_checksum_before,
        backbone_checksum_after: outcome.backbone_checksum_after,
        adapter_checksum_before: adapter_before,
        adapter_checksum_after: model.banks.params().checksum(),
    })
}

/// The frozen backbone with the trained banks under `plan`.
pub fn load_adapted(config: &RunConfig, paths: &Paths, plan: CompositionPlan) -> Result<(AdaptedModel, Vocabulary)> {
    require(&paths.backbone(), "pretrain-aux")?;
    require(&paths.adapters(), "train")?;
    let (backbone, vocab) = load_backbone(&paths.backbone())?;
    let (banks, fingerprint) = load_adapters(&paths.adapters())?;
    if fingerprint != vocab.fingerprint() {
        return Err(CliError::config(codes::VOCAB_MISMATCH, "adapters were trained against a different vocabulary"));
    }
    let model = inject_adapters(backbone, banks, plan, config.schema()?)?;
    Ok((model, vocab))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferLine {
    pub stream: String,
    pub input: String,
    pub output: String,
}

/// Greedy transfer of `sentences`. Parallel plans emit every stream; Stack
/// plans emit the directive's single combination, or every combination
/// when no directive is given.
pub fn transfer(config: &RunConfig, paths: &Paths, sentences: &[String], plan: Option<&str>, directive: Option<&str>) -> Result<Vec<TransferLine>> {
    let plan = config.inference_plan(plan)?;
    let selection = match (plan.is_stack(), directive) {
        (true, Some(d)) => Some(StackSelection::Targeted(TransferDirective::parse(d)?)),
        (true, None) => Some(StackSelection::AllCombinations),
        (false, Some(_)) => return Err(CliError::config(codes::PLAN, "a directive needs a Stack plan")),
        (false, None) => None,
    };
    let (model, vocab) = load_adapted(config, paths, plan)?;
    let inputs: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(&tokenize(s))).collect();
    if inputs.iter().any(Vec::is_empty) {
        return Err(CliError::config(codes::INVALID, "cannot transfer an empty sentence"));
    }
    let outs = model.streams_to_outputs(&inputs, selection.as_ref(), DecodeMode::Greedy, config.evaluation.max_len, config.seed)?;
    Ok(outs
        .into_iter()
        .map(|o| TransferLine {
            stream: o.assignment.join("+"),
            input: sentences[o.input].clone(),
            output: vocab.decode(o.output.content()).join(" "),
        })
        .collect())
}

pub fn report_name(plan: &CompositionPlan) -> &'static str {
    if plan.is_stack() {
        "stack"
    } else {
        "parallel"
    }
}

/// Scores transfers over the test split with the evaluation classifiers and
/// writes `eval/<parallel|stack>.{jsonl,csv}`.
pub fn evaluate(config: &RunConfig, paths: &Paths, plan: Option<&str>) -> Result<EvalReport> {
    let plan = config.inference_plan(plan)?;
    let name = report_name(&plan);
    let corpus = read_corpus(config, paths)?;
    let (model, vocab) = load_adapted(config, paths, plan)?;
    let classifiers = load_classifiers(&model.schema, &vocab, |a| paths.eval_classifier(a))?;
    require(&paths.lm(), "pretrain-aux")?;
    let lm = load_lm(&paths.lm(), &vocab)?;
    let test = if corpus.test.is_empty() { &corpus.dev } else { &corpus.test };
    let test = to_examples(&vocab, test);
    let report = run_eval(&model, &vocab, &test, &classifiers, &lm, &config.eval_config()?)?;
    if !report.summary.g.is_finite() {
        return Err(CliError::Numerical(format!("G-score is {}", report.summary.g)));
    }
    write_report(&paths.eval_report(name), &report)?;
    write_file(&paths.eval_csv(name), summary_csv(&report.summary).as_bytes())?;
    Ok(report)
}

pub fn summary_line(report: &EvalReport) -> SummaryLine {
    SummaryLine::from(&report.summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub banks: usize,
    pub per_adapter: usize,
    pub trainable: usize,
    pub backbone: usize,
    /// Size the percentage is taken against.
    pub reference: usize,
    pub percent_per_adapter: f64,
}

impl ParamReport {
    pub fn new(banks: usize, adapter: &AdapterConfig, backbone: &BackboneConfig, reference: Option<usize>) -> Self {
        let per_adapter = count_adapter_params(adapter);
        let backbone = backbone.parameter_count();
        let reference = reference.unwrap_or(backbone);
        Self {
            banks,
            per_adapter,
            trainable: banks * per_adapter,
            backbone,
            reference,
            percent_per_adapter: 100.0 * per_adapter as f64 / reference as f64,
        }
    }

    /// e.g. `trainable 15,859,200 / frozen backbone; 3,171,840 per adapter (0.78% of 406M)`
    pub fn line(&self) -> String {
        format!(
            "trainable {} / frozen backbone; {} per adapter ({:.2}% of {})",
            grouped(self.trainable),
            grouped(self.per_adapter),
            self.percent_per_adapter,
            abbreviated(self.reference)
        )
    }
}

/// Parameter accounting for the configured plan, or for the reference-scale
/// backbone with 64-wide adapters when `reference_scale` is set.
pub fn param_report(config: &RunConfig, paths: &Paths, reference_scale: bool) -> Result<ParamReport> {
    let banks = config.train_plan()?.values().len();
    if reference_scale {
        let backbone = BackboneConfig::reference_scale();
        let adapter = AdapterConfig::for_backbone(&backbone, 64);
        return Ok(ParamReport::new(banks, &adapter, &backbone, Some(REFERENCE_BACKBONE)));
    }
    let vocab_size = if paths.backbone().exists() {
        load_backbone(&paths.backbone())?.1.len()
    } else {
        Vocabulary::build(&build_corpus(config)?, config.corpus.min_count)?.len()
    };
    let backbone = config.backbone.to_core(vocab_size);
    Ok(ParamReport::new(banks, &config.adapters.to_core(&backbone), &backbone, None))
}

pub fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn abbreviated(n: usize) -> String {
    if n >= 1_000_000 && n % 1_000_000 == 0 {
        format!("{}M", n / 1_000_000)
    } else if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping() {
        assert_eq!(grouped(0), "0");
        assert_eq!(grouped(999), "999");
        assert_eq!(grouped(1000), "1,000");
        assert_eq!(grouped(15_859_200), "15,859,200");
        assert_eq!(abbreviated(406_000_000), "406M");
        assert_eq!(abbreviated(1_234_567), "1.2M");
    }

    #[test]
    fn missing_artifact_names_the_stage() {
        let dir = std::env::temp_dir().join("styleadapt-missing-stage");
        let err = train(&RunConfig::with_seed(1), &Paths::new(&dir)).unwrap_err();
        match &err {
            CliError::StageOrder { artifact, stage } => {
                assert!(artifact.ends_with("train.jsonl"));
                assert_eq!(*stage, "gen-data");
            }
            other => panic!("{other}"),
        }
        assert_eq!(err.exit_code(), 3);
    }
}
