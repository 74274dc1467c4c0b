use proptest::prelude::*;
use styleadapt_core::adapters::{adapter_forward, count_adapter_params, AdapterBanks, AdapterConfig, AdapterLayer};
use styleadapt_core::backbone::{BackboneConfig, BackboneModel, HiddenStates};
use styleadapt_core::composition::{inject_adapters, CompositionPlan};
use styleadapt_core::corpus::AttributeSchema;
use styleadapt_core::init::{seeded, uniform};

fn backbone_config(layers: (usize, usize), hidden: usize, heads: usize, vocab: usize) -> BackboneConfig {
    BackboneConfig { encoder_layers: layers.0, decoder_layers: layers.1, hidden_dim: hidden, heads, ffn_dim: 2 * hidden, max_len: 10, vocab_size: vocab }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adapter_count_matches_tensor_sizes(hidden in 1usize..40, bottleneck in 1usize..12, layers in 1usize..6, banks in 1usize..4) {
        let config = AdapterConfig { bottleneck, hidden, num_layers: layers, ..AdapterConfig::for_backbone(&BackboneConfig::toy(8), bottleneck) };
        let values: Vec<String> = (0..banks).map(|i| format!("v{i}")).collect();
        let b = AdapterBanks::initialise(config, &values, 1).unwrap();
        let summed: usize = b.records().iter().map(|r| r.3.len()).sum();
        prop_assert_eq!(summed, banks * count_adapter_params(&config));
        prop_assert_eq!(b.parameter_count(), summed);
    }

    #[test]
    fn backbone_count_matches_parameters(enc in 1usize..3, dec in 1usize..3, heads in 1usize..3, per_head in 1usize..5, vocab in 6usize..20) {
        let config = backbone_config((enc, dec), heads * per_head, heads, vocab);
        let m = BackboneModel::build(config, 3).unwrap();
        let summed: usize = m.params().iter().map(|(_, t)| t.len()).sum();
        prop_assert_eq!(summed, config.parameter_count());
    }

    #[test]
    fn zero_up_projection_is_identity(hidden in 1usize..16, bottleneck in 1usize..8, rows in 1usize..5, seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let mut layer = AdapterLayer::zeros(hidden, bottleneck);
        layer.down = uniform(&mut rng, hidden, bottleneck, 2.0);
        layer.down_bias = uniform(&mut rng, 1, bottleneck, 2.0);
        let h = uniform(&mut rng, rows, hidden, 3.0);
        prop_assert_eq!(layer.apply(&h).unwrap(), h.clone());
        let states = HiddenStates::from_rows(&[h.clone()], hidden).unwrap();
        prop_assert_eq!(adapter_forward(&layer, &states).unwrap(), states);
    }

    #[test]
    fn parallel_streams_are_stream_major(k in 2usize..6, batch in 1usize..4, seed in 0u64..100) {
        let values: Vec<String> = (0..k).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = values.iter().map(String::as_str).collect();
        let schema = AttributeSchema::from_pairs(&[("style", &refs)]).unwrap();
        let mut backbone = BackboneModel::build(backbone_config((1, 1), 8, 2, 12), seed).unwrap();
        backbone.freeze();
        let banks = AdapterBanks::initialise(AdapterConfig::for_backbone(backbone.config(), 2), &values, seed).unwrap();
        let model = inject_adapters(backbone, banks, CompositionPlan::parallel_over(&schema), schema).unwrap();
        let inputs: Vec<Vec<usize>> = (0..batch).map(|b| vec![4 + b, 5, 6]).collect();
        let state = model.encode(&inputs, None).unwrap();
        prop_assert_eq!(state.len(), k);
        let rows = state.flattened_rows();
        prop_assert_eq!(rows.len(), k * batch);
        for (i, (tag, t)) in rows.iter().enumerate() {
            prop_assert_eq!(tag, &values[i / batch]);
            prop_assert_eq!(t.rows(), inputs[i % batch].len());
        }
    }
}
