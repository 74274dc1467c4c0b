//! Self-describing JSON checkpoint container shared by every model kind:
//! format tag, version, kind, the model config, the vocabulary fingerprint
//! (and for backbones the vocabulary itself) and named parameter arrays.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use styleadapt_core::adapters::AdapterBanks;
use styleadapt_core::auxmodels::{AttributeClassifier, FluencyLM};
use styleadapt_core::backbone::BackboneModel;
use styleadapt_core::corpus::Vocabulary;
use styleadapt_core::params::ParamTable;
use styleadapt_core::Tensor;

use crate::config::{AdapterSection, BackboneSection, ClassifierSection, LmSection};
use crate::corpus_io::write_file;
use crate::error::{codes, CliError, Result};

pub const FORMAT: &str = "styleadapt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Backbone,
    Classifier,
    LanguageModel,
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Array {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Array {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self { name: name.into(), shape: [t.rows(), t.cols()], data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.shape[0], self.shape[1], self.data.clone()).map_err(CliError::from)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    pub config: serde_json::Value,
    pub vocab_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    pub arrays: Vec<Array>,
}

impl Checkpoint {
    pub fn new(kind: Kind, config: &impl Serialize, vocab_fingerprint: String, arrays: Vec<Array>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            config: serde_json::to_value(config).expect("configs serialize"),
            vocab_fingerprint,
            vocab: None,
            arrays,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoints serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    /// Reads a checkpoint and checks its format tag, version and kind.
    pub fn load(path: &Path, kind: Kind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))?;
        if ck.format != FORMAT {
            return Err(CliError::format(path, format!("unknown format tag `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(CliError::format(path, format!("unsupported version {}", ck.version)));
        }
        if ck.kind != kind {
            return Err(CliError::format(path, format!("expected a {kind:?} checkpoint, found {:?}", ck.kind)));
        }
        Ok(ck)
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| CliError::format(format!("<{:?} checkpoint>", self.kind), e.to_string()))
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let expected = vocab.fingerprint();
        if self.vocab_fingerprint != expected {
            return Err(CliError::config(
                codes::VOCAB_MISMATCH,
                format!("{:?} checkpoint was built for vocabulary {}, expected {}", self.kind, short(&self.vocab_fingerprint), short(&expected)),
            ));
        }
        Ok(())
    }

    fn load_into(&self, table: &mut ParamTable) -> Result<()> {
        let tensors = self.arrays.iter().map(|a| Ok((a.name.as_str(), a.to_tensor()?))).collect::<Result<Vec<_>>>()?;
        table.load_named(tensors.iter().map(|(n, t)| (*n, t)))?;
        Ok(())
    }
}

fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}

fn arrays(table: &ParamTable) -> Vec<Array> {
    table.iter().map(|(n, t)| Array::from_tensor(n, t)).collect()
}

pub fn backbone_checkpoint(model: &BackboneModel, vocab: &Vocabulary) -> Checkpoint {
    let mut ck = Checkpoint::new(Kind::Backbone, &BackboneSection::from_core(model.config()), vocab.fingerprint(), arrays(model.params()));
    ck.vocab = Some(vocab.tokens().to_vec());
    ck
}

/// Restores a frozen backbone and its vocabulary.
pub fn load_backbone(path: &Path) -> Result<(BackboneModel, Vocabulary)> {
    let ck = Checkpoint::load(path, Kind::Backbone)?;
    let tokens = ck.vocab.clone().ok_or_else(|| CliError::format(path, "backbone checkpoint has no vocabulary"))?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    ck.check_vocab(&vocab).map_err(|_| CliError::format(path, "vocabulary does not match its fingerprint"))?;
    let section: BackboneSection = ck.config()?;
    let mut model = BackboneModel::build(section.to_core(vocab.len()), 0)?;
    ck.load_into(model.params_mut()?)?;
    model.freeze();
    Ok((model, vocab))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierMeta {
    attribute: String,
    values: Vec<String>,
    vocab_size: usize,
    model: ClassifierSection,
}

pub fn classifier_checkpoint(c: &AttributeClassifier, vocab: &Vocabulary) -> Checkpoint {
    let meta = ClassifierMeta {
        attribute: c.attribute().into(),
        values: c.values().to_vec(),
        vocab_size: c.vocab_size(),
        model: ClassifierSection::from_core(c.config()),
    };
    Checkpoint::new(Kind::Classifier, &meta, vocab.fingerprint(), arrays(c.params()))
}

pub fn load_classifier(path: &Path, vocab: &Vocabulary) -> Result<AttributeClassifier> {
    let ck = Checkpoint::load(path, Kind::Classifier)?;
    ck.check_vocab(vocab)?;
    let meta: ClassifierMeta = ck.config()?;
    let mut c = AttributeClassifier::new(&meta.attribute, &meta.values, meta.vocab_size, meta.model.to_core(), 0)?;
    ck.load_into(c.params_mut())?;
    Ok(c)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LmMeta {
    vocab_size: usize,
    model: LmSection,
}

pub fn lm_checkpoint(lm: &FluencyLM, vocab: &Vocabulary) -> Checkpoint {
    let meta = LmMeta { vocab_size: lm.vocab_size(), model: LmSection::from_core(lm.config()) };
    Checkpoint::new(Kind::LanguageModel, &meta, vocab.fingerprint(), arrays(lm.params()))
}

pub fn load_lm(path: &Path, vocab: &Vocabulary) -> Result<FluencyLM> {
    let ck = Checkpoint::load(path, Kind::LanguageModel)?;
    ck.check_vocab(vocab)?;
    let meta: LmMeta = ck.config()?;
    let mut lm = FluencyLM::new(meta.vocab_size, meta.model.to_core(), 0)?;
    ck.load_into(lm.params_mut())?;
    Ok(lm)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    hidden: usize,
    num_layers: usize,
    values: Vec<String>,
    adapter: AdapterSection,
}

/// Adapter banks as arrays named `<value>.<layer>.<param>`.
pub fn adapter_checkpoint(banks: &AdapterBanks, vocab: &Vocabulary) -> Checkpoint {
    let c = banks.config();
    let meta = AdapterMeta {
        hidden: c.hidden,
        num_layers: c.num_layers,
        values: banks.values().map(String::from).collect(),
        adapter: AdapterSection::from_core(c),
    };
    let arrays = banks.records().into_iter().map(|(v, l, p, t)| Array::from_tensor(format!("{v}.{l}.{p}"), t)).collect();
    Checkpoint::new(Kind::Adapters, &meta, vocab.fingerprint(), arrays)
}

/// Restores adapter banks without touching any backbone.
pub fn load_adapters(path: &Path) -> Result<(AdapterBanks, String)> {
    let ck = Checkpoint::load(path, Kind::Adapters)?;
    let meta: AdapterMeta = ck.config()?;
    let mut config = meta.adapter.to_core(&styleadapt_core::backbone::BackboneConfig::toy(0));
    config.hidden = meta.hidden;
    config.num_layers = meta.num_layers;
    let mut records = Vec::with_capacity(ck.arrays.len());
    for a in &ck.arrays {
        let mut parts = a.name.rsplitn(3, '.');
        let (param, layer, value) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(l), Some(v)) => (p, l, v),
            _ => return Err(CliError::format(path, format!("array `{}` is not keyed as value.layer.param", a.name))),
        };
        let layer: usize = layer.parse().map_err(|_| CliError::format(path, format!("bad layer index in `{}`", a.name)))?;
        records.push((value, layer, param, a.to_tensor()?));
    }
    let banks = AdapterBanks::from_records(config, &meta.values, records.iter().map(|(v, l, p, t)| (*v, *l, *p, t)))?;
    Ok((banks, ck.vocab_fingerprint))
}
