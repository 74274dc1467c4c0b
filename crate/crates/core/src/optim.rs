//! Adaptive-moment optimizer with global gradient-norm clipping.

use alloc::vec::Vec;

use crate::graph::GradBuffer;
use crate::params::ParamTable;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, table: &ParamTable) -> Self {
        let zeros = || table.params().iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, table: &mut ParamTable, grads: &GradBuffer) -> f64 {
        debug_assert_eq!(grads.group, table.group());
        let norm = grads.norm();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (slot, g) in grads.grads.iter().enumerate() {
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let w = table.value_mut(slot).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.learning_rate * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Group;

    #[test]
    fn minimizes_a_quadratic() {
        let mut t = ParamTable::new(Group::Adapters);
        t.add("x", Tensor::row_vector(alloc::vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, clip_norm: None, ..Default::default() }, &t);
        for _ in 0..500 {
            let mut g = t.grad_buffer();
            g.grads[0] = t.get(0).value.clone(); // d/dx of x²/2
            opt.step(&mut t, &g);
        }
        assert!(t.get(0).value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut t = ParamTable::new(Group::Adapters);
        t.add("x", Tensor::row_vector(alloc::vec![0.0]));
        let mut opt = Adam::new(AdamConfig { learning_rate: 1.0, ..Default::default() }, &t);
        let mut g = t.grad_buffer();
        g.grads[0] = Tensor::row_vector(alloc::vec![100.0]);
        let norm = opt.step(&mut t, &g);
        assert_eq!(norm, 100.0);
        // Adam's first step has magnitude lr regardless of scale
        assert!((t.get(0).value.data()[0] + 1.0).abs() < 1e-6);
    }
}
