//! Named parameter storage and per-pass binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learnable tensors addressed by stable dotted paths such as
/// `backbone.stage1.block0.conv2.weight`. Iteration order is the sorted
/// path order, which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.entries.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same paths and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    /// Adds `factor * other` entry-wise; both stores must share their layout.
    pub fn add_scaled(&mut self, other: &ParamStore, factor: f64) -> Result<()> {
        for (path, t) in self.entries.iter_mut() {
            let o = other.get(path)?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "add_scaled",
                    expected: t.shape().to_vec(),
                    got: o.shape().to_vec(),
                });
            }
            for (d, s) in t.data_mut().iter_mut().zip(o.data()) {
                *d += factor * s;
            }
        }
        Ok(())
    }

    /// Moves all entries of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamStore) {
        for (k, v) in other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v);
        }
    }
}

/// A tape with every parameter of a store registered as a gradient-tracking
/// leaf.
pub struct Session {
    pub tape: Tape,
    vars: BTreeMap<String, Var>,
}

impl Session {
    pub fn bind(store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Self { tape, vars }
    }

    /// Wraps an existing tape whose leaves already stand for the named
    /// parameters.
    pub fn from_bindings(tape: Tape, bindings: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            tape,
            vars: bindings.into_iter().collect(),
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn param(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    /// Gradients of every bound parameter after [`Tape::backward`].
    pub fn grads(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, &v) in &self.vars {
            let g = self
                .tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v).to_vec()));
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Uniform samples in `[-bound, bound]`.
pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// He-style fan-in initialisation for ReLU networks, uniform with the
/// variance `2 / fan_in`.
pub fn he_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}
