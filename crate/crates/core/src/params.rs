//! Named parameter storage and seeded initialization.
//!
//! Parameters live in an ordered map keyed by dotted names
//! (`encoder.layer0.attn.wq` and the like). Each parameter draws from its own
//! RNG stream derived from the store seed and the name hash, so adding or
//! removing parameters never perturbs the values of the others.

use crate::error::{Error, Result};
use crate::rng::{fnv1a, splitmix64_at, Rng64};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform,
    Zeros,
    /// Identity init for layer-norm gains.
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub scheme: InitScheme,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], scheme: InitScheme) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), scheme }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn empty(rng_seed: u64) -> Self {
        ParamStore { entries: BTreeMap::new(), rng_seed }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Iteration is always in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Total scalar count across entries whose name starts with `prefix`.
    pub fn total_params_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

/// Builds a store from specs. Deterministic: each parameter's stream is
/// `splitmix64_at(seed, fnv1a(name))`, independent of spec order.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::empty(seed);
    for spec in specs {
        let numel: usize = spec.shape.iter().product();
        let value = match spec.scheme {
            InitScheme::Zeros => Tensor::zeros(&spec.shape),
            InitScheme::Ones => Tensor::full(&spec.shape, 1.0),
            InitScheme::GlorotUniform => {
                let (fan_in, fan_out) = match spec.shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (*n, *n),
                    other => {
                        return Err(Error::InvalidShape(format!(
                            "glorot init needs rank 1 or 2, got {other:?} for {}",
                            spec.name
                        )))
                    }
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = Rng64::seed_from_u64(splitmix64_at(seed, fnv1a(spec.name.as_bytes())));
                let data = (0..numel).map(|_| rng.range(-bound, bound)).collect();
                Tensor::new(spec.shape.clone(), data)?
            }
        };
        store.insert(&spec.name, value)?;
    }
    Ok(store)
}

/// Gradients keyed by parameter name; accumulation is shape-checked.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Gradients::default()
    }

    pub fn accumulate(&mut self, name: &str, g: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(t) => t.add_assign(&g),
            None => {
                self.entries.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Sums another gradient set into this one (used when batching samples).
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in other.iter() {
            self.accumulate(name, g.clone())?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
}
