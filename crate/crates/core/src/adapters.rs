//! Bottleneck adapters: `h + Up(ReLU(Down(h)))`, one per backbone layer per
//! attribute value.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{BackboneConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Var};
use crate::init::{seeded, uniform};
use crate::params::ParamTable;
use crate::tensor::{gemm_nn, Tensor};

pub const PARAM_NAMES: [&str; 4] = ["down", "down_bias", "up", "up_bias"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpInit {
    /// Zero up-projection: every adapter starts as the identity.
    Zero,
    /// Uniform in `±scale`, like the down-projection.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Bottleneck width `H_d`.
    pub bottleneck: usize,
    /// Up-projection width `H_u`; equals the backbone hidden size.
    pub hidden: usize,
    /// Adapter-bearing layers (encoder + decoder).
    pub num_layers: usize,
    pub up_init: UpInit,
    /// Half-width of the uniform initialisation.
    pub init_scale: f64,
}

impl AdapterConfig {
    pub fn for_backbone(backbone: &BackboneConfig, bottleneck: usize) -> Self {
        Self {
            bottleneck,
            hidden: backbone.hidden_dim,
            num_layers: backbone.adapter_layers(),
            up_init: UpInit::Zero,
            init_scale: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.hidden == 0 || self.num_layers == 0 {
            return Err(Error::Config("adapter widths and layer count must be positive".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!("invalid adapter init_scale {}", self.init_scale)));
        }
        Ok(())
    }

    pub fn validate_for(&self, backbone: &BackboneConfig) -> Result<()> {
        self.validate()?;
        if self.hidden != backbone.hidden_dim {
            return Err(Error::Config(format!(
                "adapter width {} differs from backbone hidden size {}",
                self.hidden, backbone.hidden_dim
            )));
        }
        if self.num_layers != backbone.adapter_layers() {
            return Err(Error::Wiring(format!(
                "adapter bank has {} layers, backbone has {}",
                self.num_layers,
                backbone.adapter_layers()
            )));
        }
        Ok(())
    }
}

/// `num_layers · (2·H_u·H_d + H_d + H_u)`.
pub fn count_adapter_params(config: &AdapterConfig) -> usize {
    let (d, u) = (config.bottleneck, config.hidden);
    config.num_layers * (2 * u * d + d + u)
}

/// One adapter as plain tensors: `down (H_u×H_d)`, `down_bias (1×H_d)`,
/// `up (H_d×H_u)`, `up_bias (1×H_u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl AdapterLayer {
    pub fn zeros(hidden: usize, bottleneck: usize) -> Self {
        Self {
            down: Tensor::zeros(hidden, bottleneck),
            down_bias: Tensor::zeros(1, bottleneck),
            up: Tensor::zeros(bottleneck, hidden),
            up_bias: Tensor::zeros(1, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.down.cols()
    }

    /// Applies the adapter to a `(time x hidden)` matrix.
    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        if h.cols() != self.hidden() {
            return Err(Error::Shape(format!("input width {} but adapter expects {}", h.cols(), self.hidden())));
        }
        let mut z = Tensor::zeros(h.rows(), self.bottleneck());
        gemm_nn(h, &self.down, &mut z);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(self.down_bias.data()) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut out = h.clone();
        gemm_nn(&z, &self.up, &mut out);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.up_bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }
}

/// Applies one adapter to every row of a padded batch; padding stays zero.
pub fn adapter_forward(layer: &AdapterLayer, h: &HiddenStates) -> Result<HiddenStates> {
    if h.hidden() != layer.hidden() {
        return Err(Error::Shape(format!("input width {} but adapter expects {}", h.hidden(), layer.hidden())));
    }
    let rows = (0..h.batch()).map(|b| layer.apply(&h.row(b))).collect::<Result<Vec<_>>>()?;
    HiddenStates::from_rows(&rows, layer.hidden())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlots {
    down: usize,
    down_bias: usize,
    up: usize,
    up_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BankEntry {
    value: String,
    layers: Vec<LayerSlots>,
}

/// A set of adapter banks, one per attribute value, sharing one trainable
/// parameter table. Parameter names are `{value}.{layer}.{param}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBanks {
    config: AdapterConfig,
    params: ParamTable,
    banks: Vec<BankEntry>,
}

impl AdapterBanks {
    pub fn new(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: ParamTable::new(Group::Adapters), banks: Vec::new() })
    }

    /// Builds one freshly initialised bank per value. Bank `i` is seeded
    /// from `seed` and `i`, so adding banks never perturbs earlier ones.
    pub fn initialise<S: AsRef<str>>(config: AdapterConfig, values: &[S], seed: u64) -> Result<Self> {
        let mut banks = Self::new(config)?;
        for (i, v) in values.iter().enumerate() {
            banks.add_bank(v.as_ref(), seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64))?;
        }
        Ok(banks)
    }

    pub fn add_bank(&mut self, value: &str, seed: u64) -> Result<usize> {
        if self.index_of(value).is_some() {
            return Err(Error::Config(format!("duplicate adapter bank `{value}`")));
        }
        let c = self.config;
        let mut rng = seeded(seed);
        let mut layers = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let name = |p: &str| format!("{value}.{l}.{p}");
            let down = self.params.add(name("down"), uniform(&mut rng, c.hidden, c.bottleneck, c.init_scale));
            let down_bias = self.params.add(name("down_bias"), Tensor::zeros(1, c.bottleneck));
            let up_value = match c.up_init {
                UpInit::Zero => Tensor::zeros(c.bottleneck, c.hidden),
                UpInit::Random => uniform(&mut rng, c.bottleneck, c.hidden, c.init_scale),
            };
            let up = self.params.add(name("up"), up_value);
            let up_bias = self.params.add(name("up_bias"), Tensor::zeros(1, c.hidden));
            layers.push(LayerSlots { down, down_bias, up, up_bias });
        }
        self.banks.push(BankEntry { value: value.into(), layers });
        Ok(self.banks.len() - 1)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.banks.iter().map(|b| b.value.as_str())
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.banks.iter().position(|b| b.value == value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn layer(&self, bank: usize, layer: usize) -> AdapterLayer {
        let s = self.banks[bank].layers[layer];
        let v = |slot: usize| self.params.get(slot).value.clone();
        AdapterLayer { down: v(s.down), down_bias: v(s.down_bias), up: v(s.up), up_bias: v(s.up_bias) }
    }

    pub fn set_layer(&mut self, bank: usize, layer: usize, value: &AdapterLayer) -> Result<()> {
        let s = self.banks[bank].layers[layer];
        for (slot, t) in [(s.down, &value.down), (s.down_bias, &value.down_bias), (s.up, &value.up), (s.up_bias, &value.up_bias)] {
            let target = self.params.value_mut(slot);
            if target.shape() != t.shape() {
                return Err(Error::Shape(format!("adapter tensor shape {:?}, expected {:?}", t.shape(), target.shape())));
            }
            *target = t.clone();
        }
        Ok(())
    }

    /// Zeroes every up-projection weight and bias, turning all adapters into the identity.
    pub fn zero_up_projections(&mut self) {
        for b in 0..self.banks.len() {
            for s in self.banks[b].layers.clone() {
                self.params.value_mut(s.up).fill(0.0);
                self.params.value_mut(s.up_bias).fill(0.0);
            }
        }
    }

    /// Slots of bank `bank` in parameter-table order.
    pub fn bank_slots(&self, bank: usize) -> Vec<usize> {
        self.banks[bank].layers.iter().flat_map(|s| [s.down, s.down_bias, s.up, s.up_bias]).collect()
    }

    /// Graph form of the adapter of `bank` at `layer`.
    pub fn apply<'a>(&'a self, g: &mut Graph<'a>, bank: usize, layer: usize, x: Var) -> Var {
        let s = self.banks[bank].layers[layer];
        let p = &self.params;
        let wd = g.param(p.get(s.down));
        let bd = g.param(p.get(s.down_bias));
        let z = g.linear(x, wd, bd);
        let z = g.relu(z);
        let wu = g.param(p.get(s.up));
        let bu = g.param(p.get(s.up_bias));
        let u = g.linear(z, wu, bu);
        g.add(x, u)
    }

    /// Restores a set of banks from `(value, layer, param, tensor)` records.
    pub fn from_records<'t>(
        config: AdapterConfig,
        values: &[String],
        records: impl IntoIterator<Item = (&'t str, usize, &'t str, &'t Tensor)>,
    ) -> Result<Self> {
        let mut banks = Self::new(config)?;
        for v in values {
            banks.add_bank(v, 0)?;
        }
        let named: Vec<(String, &Tensor)> = records
            .into_iter()
            .map(|(v, l, p, t)| (format!("{v}.{l}.{p}"), t))
            .collect();
        banks.params.load_named(named.iter().map(|(n, t)| (n.as_str(), *t)))?;
        Ok(banks)
    }

    /// `(value, layer, param, tensor)` for every stored array.
    pub fn records(&self) -> Vec<(&str, usize, &'static str, &Tensor)> {
        let mut out = Vec::with_capacity(self.params.len());
        for b in &self.banks {
            for (l, s) in b.layers.iter().enumerate() {
                for (name, slot) in PARAM_NAMES.iter().zip([s.down, s.down_bias, s.up, s.up_bias]) {
                    out.push((b.value.as_str(), l, *name, &self.params.get(slot).value));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded;
    use alloc::vec;

    fn random_layer(seed: u64, hidden: usize, bottleneck: usize) -> AdapterLayer {
        let mut rng = seeded(seed);
        AdapterLayer {
            down: uniform(&mut rng, hidden, bottleneck, 0.5),
            down_bias: uniform(&mut rng, 1, bottleneck, 0.5),
            up: uniform(&mut rng, bottleneck, hidden, 0.5),
            up_bias: uniform(&mut rng, 1, hidden, 0.5),
        }
    }

    #[test]
    fn count_closed_form() {
        let reference = AdapterConfig { bottleneck: 64, hidden: 1024, num_layers: 24, up_init: UpInit::Zero, init_scale: 0.01 };
        assert_eq!(count_adapter_params(&reference), 3_171_840);
        let unit = AdapterConfig { bottleneck: 1, hidden: 1, num_layers: 1, ..reference };
        assert_eq!(count_adapter_params(&unit), 4);
    }

    #[test]
    fn bank_count_matches_formula() {
        let cfg = AdapterConfig { bottleneck: 3, hidden: 5, num_layers: 4, up_init: UpInit::Random, init_scale: 0.1 };
        let banks = AdapterBanks::initialise(cfg, &["a", "b"], 1).unwrap();
        assert_eq!(banks.parameter_count(), 2 * count_adapter_params(&cfg));
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut layer = random_layer(1, 6, 3);
        layer.up.fill(0.0);
        layer.up_bias.fill(0.0);
        let h = uniform(&mut seeded(2), 4, 6, 3.0);
        assert_eq!(layer.apply(&h).unwrap(), h);
    }

    #[test]
    fn zero_input_gives_up_bias_through_relu_of_zero() {
        let mut layer = random_layer(3, 4, 2);
        layer.down_bias.fill(0.0);
        let out = layer.apply(&Tensor::zeros(2, 4)).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), layer.up_bias.data());
        }
    }

    #[test]
    fn matches_straight_line_formula() {
        let layer = random_layer(4, 5, 3);
        let h = uniform(&mut seeded(5), 3, 5, 1.0);
        let out = layer.apply(&h).unwrap();
        for t in 0..3 {
            for j in 0..5 {
                let mut acc = h.get(t, j) + layer.up_bias.get(0, j);
                for k in 0..3 {
                    let mut z = layer.down_bias.get(0, k);
                    for i in 0..5 {
                        z += h.get(t, i) * layer.down.get(i, k);
                    }
                    acc += z.max(0.0) * layer.up.get(k, j);
                }
                assert!((acc - out.get(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_and_tensor_forms_agree() {
        let cfg = AdapterConfig { bottleneck: 3, hidden: 5, num_layers: 2, up_init: UpInit::Random, init_scale: 0.4 };
        let banks = AdapterBanks::initialise(cfg, &["x"], 9).unwrap();
        let h = uniform(&mut seeded(6), 4, 5, 1.0);
        let mut g = Graph::inference();
        let x = g.constant(h.clone());
        let y = banks.apply(&mut g, 0, 1, x);
        assert_eq!(g.value(y), &banks.layer(0, 1).apply(&h).unwrap());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let layer = AdapterLayer::zeros(4, 2);
        assert!(matches!(layer.apply(&Tensor::zeros(1, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn records_round_trip() {
        let cfg = AdapterConfig { bottleneck: 2, hidden: 3, num_layers: 2, up_init: UpInit::Random, init_scale: 0.3 };
        let banks = AdapterBanks::initialise(cfg, &["past", "active"], 4).unwrap();
        let recs = banks.records();
        assert_eq!(recs.len(), 2 * 2 * 4);
        let values = vec![String::from("past"), String::from("active")];
        let back = AdapterBanks::from_records(cfg, &values, recs.iter().map(|(v, l, p, t)| (*v, *l, *p, *t))).unwrap();
        assert_eq!(back.params().checksum(), banks.params().checksum());
    }

    #[test]
    fn backbone_mismatch_is_wiring_error() {
        let b = BackboneConfig::toy(10);
        let mut cfg = AdapterConfig::for_backbone(&b, 8);
        cfg.num_layers = 3;
        assert!(matches!(cfg.validate_for(&b), Err(Error::Wiring(_))));
    }
}
