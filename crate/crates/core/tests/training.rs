use styleadapt_core::adapters::{AdapterBanks, AdapterConfig};
use styleadapt_core::auxmodels::{AttributeClassifier, ClassifierConfig};
use styleadapt_core::backbone::{BackboneConfig, BackboneModel};
use styleadapt_core::composition::{inject_adapters, CompositionPlan};
use styleadapt_core::corpus::AttributeSchema;
use styleadapt_core::init::{below, seeded};
use styleadapt_core::training::{train, TrainExample, TrainingConfig};

#[test]
fn reconstruction_only_training_lowers_rec_and_keeps_backbone() {
    let schema = AttributeSchema::tense_voice();
    let vocab = 14;
    let config = BackboneConfig { encoder_layers: 1, decoder_layers: 1, hidden_dim: 16, heads: 2, ffn_dim: 32, max_len: 10, vocab_size: vocab };
    let mut backbone = BackboneModel::build(config, 11).unwrap();
    backbone.freeze();
    let values: Vec<String> = schema.attributes().iter().flat_map(|a| a.values.clone()).collect();
    let banks = AdapterBanks::initialise(AdapterConfig::for_backbone(&config, 8), &values, 12).unwrap();
    let mut model = inject_adapters(backbone, banks, CompositionPlan::parallel_over(&schema), schema.clone()).unwrap();
    let classifiers: Vec<AttributeClassifier> = schema
        .attributes()
        .iter()
        .map(|a| AttributeClassifier::new(&a.name, &a.values, vocab, ClassifierConfig::default(), 1).unwrap())
        .collect();
    let mut rng = seeded(5);
    let data: Vec<TrainExample> = (0..24)
        .map(|_| TrainExample {
            ids: (0..4).map(|_| 4 + below(&mut rng, vocab - 4)).collect(),
            labels: vec![below(&mut rng, 3), below(&mut rng, 2)],
        })
        .collect();
    let cfg = TrainingConfig { lambda: 0.0, epochs: 5, learning_rate: 1e-2, batch_size: 8, sentences_per_epoch: None, ..Default::default() };
    let before = model.banks.params().checksum();
    let outcome = train(&mut model, &data, &classifiers, &cfg, &[], &mut |_| {}).unwrap();
    let rec: Vec<f64> = outcome.log.iter().map(|r| r.loss.rec).collect();
    assert!(rec.windows(2).all(|w| w[1] < w[0]), "{rec:?}");
    assert_eq!(outcome.backbone_checksum_before, outcome.backbone_checksum_after);
    assert_ne!(model.banks.params().checksum(), before);
    assert!(outcome.log.iter().all(|r| r.loss.cls == 0.0));
}
