//! TOML run configuration. Every section mirrors one core config; unknown
//! keys are rejected and `seed` is required.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use styleadapt_core::adapters::{AdapterConfig, UpInit};
use styleadapt_core::auxmodels::{ClassifierConfig, LanguageModelConfig};
use styleadapt_core::backbone::{BackboneConfig, DenoiseConfig};
use styleadapt_core::composition::CompositionPlan;
use styleadapt_core::corpus::{Attribute, AttributeSchema, SplitRatios, TemplateBank};
use styleadapt_core::evaluation::{EvalConfig, PplAggregation};
use styleadapt_core::training::TrainingConfig;

use crate::error::{codes, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub denoise: DenoiseSection,
    #[serde(default)]
    pub classifier: ClassifierSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub adapters: AdapterSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeEntry {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub size: usize,
    pub dev_ratio: f64,
    pub test_ratio: f64,
    pub min_count: usize,
    pub attributes: Vec<AttributeEntry>,
    /// Template bank file; the built-in bank when absent.
    pub templates: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let schema = AttributeSchema::tense_voice();
        let ratios = SplitRatios::default();
        Self {
            size: 5000,
            dev_ratio: ratios.dev,
            test_ratio: ratios.test,
            min_count: 1,
            attributes: schema
                .attributes()
                .iter()
                .map(|a| AttributeEntry { name: a.name.clone(), values: a.values.clone() })
                .collect(),
            templates: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self::from_core(&BackboneConfig::toy(0))
    }
}

impl BackboneSection {
    pub fn from_core(c: &BackboneConfig) -> Self {
        Self {
            encoder_layers: c.encoder_layers,
            decoder_layers: c.decoder_layers,
            hidden_dim: c.hidden_dim,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
        }
    }

    pub fn to_core(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            vocab_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub span_prob: f64,
    pub max_span: usize,
    pub shuffle_prob: f64,
}

impl Default for DenoiseSection {
    fn default() -> Self {
        let d = DenoiseConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            mask_prob: d.mask_prob,
            span_prob: d.span_prob,
            max_span: d.max_span,
            shuffle_prob: d.shuffle_prob,
        }
    }
}

impl DenoiseSection {
    pub fn to_core(&self, seed: u64) -> DenoiseConfig {
        DenoiseConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            mask_prob: self.mask_prob,
            span_prob: self.span_prob,
            max_span: self.max_span,
            shuffle_prob: self.shuffle_prob,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self::from_core(&ClassifierConfig::default())
    }
}

impl ClassifierSection {
    pub fn from_core(c: &ClassifierConfig) -> Self {
        Self {
            embed_dim: c.embed_dim,
            widths: c.widths.clone(),
            filters: c.filters,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
        }
    }

    pub fn to_core(&self) -> ClassifierConfig {
        ClassifierConfig {
            embed_dim: self.embed_dim,
            widths: self.widths.clone(),
            filters: self.filters,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        Self::from_core(&LanguageModelConfig::default())
    }
}

impl LmSection {
    pub fn from_core(c: &LanguageModelConfig) -> Self {
        Self {
            layers: c.layers,
            hidden_dim: c.hidden_dim,
            heads: c.heads,
            ffn_dim: c.ffn_dim,
            max_len: c.max_len,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
        }
    }

    pub fn to_core(&self) -> LanguageModelConfig {
        LanguageModelConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpInitName {
    Zero,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub bottleneck: usize,
    pub up_init: UpInitName,
    pub init_scale: f64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self { bottleneck: 32, up_init: UpInitName::Zero, init_scale: 0.01 }
    }
}

impl AdapterSection {
    pub fn to_core(&self, backbone: &BackboneConfig) -> AdapterConfig {
        AdapterConfig {
            up_init: match self.up_init {
                UpInitName::Zero => UpInit::Zero,
                UpInitName::Random => UpInit::Random,
            },
            init_scale: self.init_scale,
            ..AdapterConfig::for_backbone(backbone, self.bottleneck)
        }
    }

    pub fn from_core(c: &AdapterConfig) -> Self {
        Self {
            bottleneck: c.bottleneck,
            up_init: match c.up_init {
                UpInit::Zero => UpInitName::Zero,
                UpInit::Random => UpInitName::Random,
            },
            init_scale: c.init_scale,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    /// Plan used for training; one Parallel block over every value when absent.
    pub train: Option<String>,
    /// Plan used by `transfer` and `evaluate` unless overridden on the command line.
    pub inference: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_stream: usize,
    pub baseline_decay: f64,
    pub use_baseline: bool,
    pub clip_norm: Option<f64>,
    pub temperature: f64,
    pub max_len: usize,
    pub sentences_per_epoch: Option<usize>,
    pub degenerate_reward: Option<f64>,
    pub floor_repeats: bool,
    /// Dev sentences decoded after every epoch for the log.
    pub probe_size: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            samples_per_stream: t.samples_per_stream,
            baseline_decay: t.baseline_decay,
            use_baseline: t.use_baseline,
            clip_norm: t.clip_norm,
            temperature: t.temperature,
            max_len: t.max_len,
            sentences_per_epoch: t.sentences_per_epoch,
            degenerate_reward: t.degenerate_reward,
            floor_repeats: t.floor_repeats,
            probe_size: 50,
        }
    }
}

impl TrainingSection {
    pub fn to_core(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            samples_per_stream: self.samples_per_stream,
            baseline_decay: self.baseline_decay,
            use_baseline: self.use_baseline,
            seed,
            clip_norm: self.clip_norm,
            temperature: self.temperature,
            max_len: self.max_len,
            sentences_per_epoch: self.sentences_per_epoch,
            degenerate_reward: self.degenerate_reward,
            floor_repeats: self.floor_repeats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub max_len: usize,
    /// `sentence_mean` or `token_weighted`.
    pub ppl_aggregation: String,
    pub max_sentences: Option<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { max_len: e.max_len, ppl_aggregation: e.ppl_aggregation.as_str().into(), max_sentences: e.max_sentences }
    }
}

impl RunConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            corpus: CorpusSection::default(),
            backbone: BackboneSection::default(),
            denoise: DenoiseSection::default(),
            classifier: ClassifierSection::default(),
            lm: LmSection::default(),
            adapters: AdapterSection::default(),
            plan: PlanSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::config(codes::SYNTAX, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::parse(&text)?;
        if let Some(t) = &config.corpus.templates {
            if t.is_relative() {
                config.corpus.templates = Some(path.parent().unwrap_or(Path::new(".")).join(t));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        let attrs = self
            .corpus
            .attributes
            .iter()
            .map(|a| Attribute { name: a.name.clone(), values: a.values.clone() })
            .collect();
        AttributeSchema::new(attrs).map_err(|e| CliError::config(codes::INVALID, e.to_string()))
    }

    pub fn template_bank(&self) -> Result<TemplateBank> {
        match &self.corpus.templates {
            None => Ok(TemplateBank::default_bank()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                TemplateBank::parse(&text).map_err(|e| CliError::config(codes::INVALID, format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn train_plan(&self) -> Result<CompositionPlan> {
        let schema = self.schema()?;
        let plan = match &self.plan.train {
            Some(text) => parse_plan(text)?,
            None => CompositionPlan::parallel_over(&schema),
        };
        if plan.is_stack() {
            return Err(CliError::config(codes::STACK_TRAIN, format!("`{plan}` is a Stack plan; Stack plans are inference-only")));
        }
        plan.validate(&schema).map_err(|e| CliError::config(codes::PLAN, e.to_string()))?;
        Ok(plan)
    }

    pub fn inference_plan(&self, overridden: Option<&str>) -> Result<CompositionPlan> {
        let schema = self.schema()?;
        let plan = match overridden.or(self.plan.inference.as_deref()) {
            Some(text) => parse_plan(text)?,
            None => return self.train_plan(),
        };
        plan.validate(&schema).map_err(|e| CliError::config(codes::PLAN, e.to_string()))?;
        Ok(plan)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            max_len: self.evaluation.max_len,
            ppl_aggregation: PplAggregation::parse(&self.evaluation.ppl_aggregation)
                .map_err(|e| CliError::config(codes::INVALID, e.to_string()))?,
            max_sentences: self.evaluation.max_sentences,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: styleadapt_core::Error| CliError::config(codes::INVALID, e.to_string());
        let t = &self.training;
        if !(0.0..=1.0).contains(&t.lambda) {
            return Err(CliError::config(codes::LAMBDA_RANGE, format!("training.lambda must lie in [0, 1], got {}", t.lambda)));
        }
        self.schema()?;
        if let Some(path) = &self.corpus.templates {
            if !path.exists() {
                return Err(CliError::config(codes::INVALID, format!("template bank {} does not exist", path.display())));
            }
        }
        if self.corpus.size == 0 || self.corpus.min_count == 0 {
            return Err(CliError::config(codes::INVALID, "corpus.size and corpus.min_count must be positive"));
        }
        self.backbone.to_core(8).validate().map_err(invalid)?;
        self.classifier.to_core().validate().map_err(invalid)?;
        self.lm.to_core().validate().map_err(invalid)?;
        self.adapters.to_core(&self.backbone.to_core(8)).validate().map_err(invalid)?;
        t.to_core(self.seed).validate().map_err(invalid)?;
        let d = &self.denoise;
        if !(0.0..=1.0).contains(&d.mask_prob) || !(0.0..=1.0).contains(&d.span_prob) || !(0.0..=1.0).contains(&d.shuffle_prob) {
            return Err(CliError::config(codes::INVALID, "denoise probabilities must lie in [0, 1]"));
        }
        if d.batch_size == 0 || !(d.learning_rate > 0.0) {
            return Err(CliError::config(codes::INVALID, "denoise.batch_size and denoise.learning_rate must be positive"));
        }
        self.train_plan()?;
        self.inference_plan(None)?;
        self.eval_config()?;
        Ok(())
    }
}

pub fn parse_plan(text: &str) -> Result<CompositionPlan> {
    CompositionPlan::parse(text).map_err(|e| CliError::config(codes::PLAN, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::parse("[training]\nlambda = 0.9\n").unwrap_err();
        assert!(matches!(err, CliError::Config { code: codes::SYNTAX, .. }), "{err}");
        assert_eq!(RunConfig::parse("seed = 3").unwrap(), RunConfig::with_seed(3));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("seed = 1\n[training]\nlamda = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(RunConfig::parse("seed = 1\ncolour = 2\n").is_err());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::with_seed(11);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn distinct_codes() {
        let lambda = RunConfig::parse("seed = 1\n[training]\nlambda = 1.5\n").unwrap_err();
        assert!(matches!(lambda, CliError::Config { code: codes::LAMBDA_RANGE, .. }));
        let stack = RunConfig::parse("seed = 1\n[plan]\ntrain = \"Stack(Parallel(future,past,present),Parallel(passive,active))\"\n").unwrap_err();
        assert!(matches!(stack, CliError::Config { code: codes::STACK_TRAIN, .. }));
        let plan = RunConfig::parse("seed = 1\n[plan]\ninference = \"Parallel(future,\"\n").unwrap_err();
        assert!(plan.to_string().contains("position"), "{plan}");
        assert_eq!(lambda.exit_code(), 2);
    }
}
