use std::collections::BTreeSet;

use styleadapt::checkpoint::{
    adapter_checkpoint, backbone_checkpoint, classifier_checkpoint, load_adapters, load_backbone, load_classifier, Checkpoint, Kind,
};
use styleadapt::config::RunConfig;
use styleadapt::corpus_io::{from_jsonl, read_tsv_split, to_jsonl, write_tsv_layout};
use styleadapt::error::codes;
use styleadapt::pipeline::build_corpus;
use styleadapt::CliError;
use styleadapt_core::adapters::{AdapterBanks, AdapterConfig, UpInit};
use styleadapt_core::auxmodels::{AttributeClassifier, ClassifierConfig};
use styleadapt_core::backbone::{BackboneConfig, BackboneModel};
use styleadapt_core::corpus::{CorpusSplit, SplitName, Vocabulary};

fn corpus() -> CorpusSplit {
    let mut config = RunConfig::with_seed(9);
    config.corpus.size = 300;
    build_corpus(&config).unwrap()
}

#[test]
fn jsonl_round_trip_is_byte_identical() {
    let c = corpus();
    for name in SplitName::ALL {
        let text = to_jsonl(c.get(name), &c.schema);
        let back = from_jsonl(&text, &c.schema).unwrap();
        assert_eq!(back, c.get(name));
        assert_eq!(to_jsonl(&back, &c.schema), text);
    }
}

#[test]
fn tsv_layout_round_trips_every_split() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    write_tsv_layout(dir.path(), &c).unwrap();
    assert!(dir.path().join("train").join("future+passive.tsv").exists());
    for name in SplitName::ALL {
        let back: BTreeSet<_> = read_tsv_split(dir.path(), name, &c.schema).unwrap().into_iter().map(|s| (s.tokens, s.labels)).collect();
        let want: BTreeSet<_> = c.get(name).iter().cloned().map(|s| (s.tokens, s.labels)).collect();
        assert_eq!(back, want);
    }
}

#[test]
fn tsv_rejects_unknown_file_names() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    write_tsv_layout(dir.path(), &c).unwrap();
    std::fs::write(dir.path().join("dev").join("sometime+passive.tsv"), "a b c\n").unwrap();
    assert!(read_tsv_split(dir.path(), SplitName::Dev, &c.schema).is_err());
}

fn vocab() -> Vocabulary {
    Vocabulary::build(&corpus(), 1).unwrap()
}

#[test]
fn checkpoints_round_trip() {
    let vocab = vocab();
    let dir = tempfile::tempdir().unwrap();
    let config = BackboneConfig { encoder_layers: 1, decoder_layers: 1, hidden_dim: 8, heads: 2, ffn_dim: 16, max_len: 24, vocab_size: vocab.len() };
    let mut backbone = BackboneModel::build(config, 4).unwrap();
    backbone.freeze();
    let path = dir.path().join("backbone.json");
    backbone_checkpoint(&backbone, &vocab).save(&path).unwrap();
    let (loaded, loaded_vocab) = load_backbone(&path).unwrap();
    assert_eq!(loaded.checksum(), backbone.checksum());
    assert!(loaded.is_frozen());
    assert_eq!(loaded_vocab, vocab);

    let values = vec!["past".to_string(), "present".to_string(), "future".to_string()];
    let classifier = AttributeClassifier::new("tense", &values, vocab.len(), ClassifierConfig::default(), 2).unwrap();
    let path = dir.path().join("classifier.json");
    classifier_checkpoint(&classifier, &vocab).save(&path).unwrap();
    assert_eq!(load_classifier(&path, &vocab).unwrap().checksum(), classifier.checksum());

    let adapter = AdapterConfig { up_init: UpInit::Random, ..AdapterConfig::for_backbone(&config, 3) };
    let banks = AdapterBanks::initialise(adapter, &values, 5).unwrap();
    let path = dir.path().join("adapters.json");
    adapter_checkpoint(&banks, &vocab).save(&path).unwrap();
    let (loaded, fingerprint) = load_adapters(&path).unwrap();
    assert_eq!(fingerprint, vocab.fingerprint());
    assert_eq!(loaded.params().checksum(), banks.params().checksum());
    assert_eq!(loaded.values().collect::<Vec<_>>(), banks.values().collect::<Vec<_>>());
}

#[test]
fn classifier_from_another_vocabulary_is_refused() {
    let vocab = vocab();
    let other = Vocabulary::from_tokens(vocab.tokens()[..vocab.len() - 1].to_vec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let values = vec!["active".to_string(), "passive".to_string()];
    let classifier = AttributeClassifier::new("voice", &values, vocab.len(), ClassifierConfig::default(), 2).unwrap();
    let path = dir.path().join("c.json");
    classifier_checkpoint(&classifier, &vocab).save(&path).unwrap();
    let err = load_classifier(&path, &other).unwrap_err();
    assert!(matches!(err, CliError::Config { code: codes::VOCAB_MISMATCH, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_kind_and_version_are_checked() {
    let vocab = vocab();
    let dir = tempfile::tempdir().unwrap();
    let values = vec!["active".to_string(), "passive".to_string()];
    let classifier = AttributeClassifier::new("voice", &values, vocab.len(), ClassifierConfig::default(), 2).unwrap();
    let mut ck = classifier_checkpoint(&classifier, &vocab);
    let path = dir.path().join("c.json");
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path, Kind::Adapters).is_err());
    ck.version += 1;
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path, Kind::Classifier).is_err());
}
