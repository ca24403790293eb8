//! Named parameter storage and binding onto a tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the zero-mean normal used for weight init.
pub const INIT_STD: f32 = 0.02;

/// FNV-1a, used to derive a stable per-parameter seed from its name.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Normal(0, `INIT_STD`) weights, seeded by `seed` and the name so a
    /// given parameter gets the same values in every model that has it.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
        let dist = Normal::new(0.0f32, INIT_STD).expect("valid std");
        self.insert(name, Tensor::from_fn(shape, |_| dist.sample(&mut rng)));
    }

    /// Registers `{prefix}.weight (cout, cin, k, k)` and a zero `{prefix}.bias`.
    pub fn add_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, seed: u64) {
        self.init_normal(&format!("{prefix}.weight"), &[cout, cin, k, k], seed);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
    }

    /// Registers a transposed conv, weight laid out `(cin, cout, k, k)`.
    pub fn add_conv_transpose(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, seed: u64) {
        self.init_normal(&format!("{prefix}.weight"), &[cin, cout, k, k], seed);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
    }

    /// Registers `{prefix}.gain` (ones) and `{prefix}.shift` (zeros).
    pub fn add_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gain"), Tensor::ones(&[channels]));
        self.insert(format!("{prefix}.shift"), Tensor::zeros(&[channels]));
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => return Err(Error::shape("params", t.shape(), o.shape())),
                None => return Err(Error::MissingParam(name.clone())),
            }
        }
        if let Some(extra) = other.names().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradient values for each bound parameter; parameters that received
    /// none are left out.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), tape.value(g).as_ref().clone())))
            .collect()
    }
}
