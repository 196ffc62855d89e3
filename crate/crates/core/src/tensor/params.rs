//! Named parameter storage shared between models, the optimizer and
//! checkpoints.

use super::tape::{Tape, VarId};
use super::{ParamInit, Tensor};
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// All parameters of a model, keyed by a stable dotted name. Iteration order is
/// the name order, which makes optimizer updates and gradient accumulation
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Create a parameter if absent, otherwise return the existing one
    /// unchanged (so builders can be re-run against a loaded checkpoint).
    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        init: ParamInit,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        self.params
            .entry(name.to_string())
            .or_insert_with(|| init.materialize(shape, rng))
            .clone()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Flat name → data map for serialization.
    pub fn to_raw(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), (v.shape().to_vec(), v.to_vec())))
            .collect()
    }

    pub fn from_raw(raw: BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (k, (shape, data)) in raw {
            params.insert(k, Tensor::new(shape, data)?);
        }
        Ok(ParamStore { params })
    }
}

/// Parameter leaves bound to one tape for a single forward/backward pass.
pub struct BoundParams<'a> {
    tape: &'a Tape,
    vars: BTreeMap<String, VarId>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(tape: &'a Tape, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, value)| (name.to_string(), tape.leaf(value.clone())))
            .collect();
        BoundParams { tape, vars }
    }

    pub fn var(&self, name: &str) -> Result<VarId> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} not bound to tape")))
    }

    /// Collect the cotangents of every bound parameter into `acc`, in name
    /// order, after a backward pass on the same tape.
    pub fn accumulate_grads(&self, grads: &super::tape::Gradients, acc: &mut GradMap) {
        for (name, &var) in &self.vars {
            if let Some(g) = grads.get(var) {
                acc.add(name, g);
            }
        }
        let _ = self.tape;
    }
}

/// Accumulated gradients keyed like the [`ParamStore`].
#[derive(Clone, Default)]
pub struct GradMap {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.grads.get_mut(name) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => {
                self.grads.insert(name.to_string(), g.to_vec());
            }
        }
    }

    /// Merge another gradient map in (summing overlapping entries).
    pub fn merge(&mut self, other: &GradMap) {
        for (name, g) in &other.grads {
            self.add(name, g);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
