//! Named parameter storage.
//!
//! Every parameter is initialized from its own ChaCha8 stream keyed by the
//! run seed and a hash of its name, so adding or removing one module (for
//! example DSA) leaves every other parameter's initial value unchanged.

use std::collections::BTreeMap;

use dsa_core::{CompGraph, ConvWeights, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 64-bit FNV-1a.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_with_prefix("")
    }

    /// Adds `prefix.w` and `prefix.b` for an `out × in × k × k` convolution.
    pub fn init_conv(&mut self, seed: u64, prefix: &str, out: usize, inp: usize, k: usize, bias: f64) {
        let mut rng = param_rng(seed, &format!("{prefix}.w"));
        let w = ConvWeights::uniform_fan_in(out, inp, k, &mut rng);
        self.insert(format!("{prefix}.w"), w.weight_tensor());
        self.insert(format!("{prefix}.b"), Tensor::new(vec![out], vec![bias; out]).expect("bias shape"));
    }

    pub fn init_scalar(&mut self, name: &str, value: f64) {
        self.insert(name, Tensor::scalar(value));
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut CompGraph) -> GraphParams {
        let ids = self.params.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone()))).collect();
        GraphParams { ids }
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvWeights> {
        Ok(ConvWeights::from_tensors(
            self.get(&format!("{prefix}.w"))?,
            self.get(&format!("{prefix}.b"))?,
        )?)
    }

    /// Draws every parameter value uniformly in `±scale` (test helper for
    /// models whose parameters should be far from initialization).
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        for (name, t) in self.params.iter_mut() {
            let mut rng = param_rng(seed ^ 0x5eed, name);
            for v in t.data_mut() {
                *v = rng.random_range(-scale..=scale);
            }
        }
    }
}

/// Graph leaves for a [`ParamStore`], by name.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphParams {
    ids: BTreeMap<String, NodeId>,
}

impl GraphParams {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn init_independent_of_other_params() {
        let mut a = ParamStore::new();
        a.init_conv(3, "x", 2, 2, 1, 0.0);
        let mut b = ParamStore::new();
        b.init_conv(3, "other", 4, 4, 3, 0.0);
        b.init_conv(3, "x", 2, 2, 1, 0.0);
        assert!(a.get("x.w").unwrap().bitwise_eq(b.get("x.w").unwrap()));
        assert_eq!(b.count_with_prefix("x."), 6);
    }
}
