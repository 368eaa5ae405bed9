//! Named parameter storage and its binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Parameters keyed by dotted name (`encoder.0.attn.col.wq`), iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Verifies that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let missing: Vec<String> = self
            .map
            .keys()
            .filter(|k| !other.map.contains_key(*k))
            .cloned()
            .collect();
        let extra: Vec<String> = other
            .map
            .keys()
            .filter(|k| !self.map.contains_key(*k))
            .cloned()
            .collect();
        let mismatched: Vec<String> = self
            .map
            .iter()
            .filter_map(|(k, v)| match other.map.get(k) {
                Some(o) if o.shape() != v.shape() => Some(k.clone()),
                _ => None,
            })
            .collect();
        if missing.is_empty() && extra.is_empty() && mismatched.is_empty() {
            Ok(())
        } else {
            Err(Error::ParamMismatch {
                missing,
                extra,
                mismatched,
            })
        }
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }
}

/// Parameters of one [`ParamStore`] living on a particular tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(alloc::format!("unknown parameter {name}")))
    }

    pub fn var(&self, prefix: &str, name: &str) -> Result<Var> {
        self.get(&join(prefix, name))
    }

    /// Rebinds `name` to another variable, e.g. to differentiate with respect
    /// to one parameter in isolation.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Contract(alloc::format!("unknown parameter {name}"))),
        }
    }

    /// Extracts the gradient of every bound parameter.
    pub fn take_grads(&self, grads: &mut Gradients) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                grads
                    .take(v)
                    .map(|g| (k.clone(), g))
                    .ok_or_else(|| Error::Contract(alloc::format!("no gradient for {k}")))
            })
            .collect()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: SplitMix64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::new(seed),
        }
    }

    /// Uniform in `±sqrt(3·gain / fan_in)`, i.e. variance `gain / fan_in`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
        let bound = libm::sqrt(3.0 * gain / fan_in as f64);
        Tensor::from_fn(shape, |_| self.rng.symmetric(bound))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.symmetric(bound))
    }
}
