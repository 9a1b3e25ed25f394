//! Named parameter storage shared by all trainable components.
//!
//! Parameters live outside any tape; each training step binds the arrays it
//! needs as tape leaves through a [`Binder`], so tied weights bind exactly
//! once per step and receive accumulated gradients.

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Grads, NodeId, Tape};

/// Ordered map of parameter name to tensor. Insertion order is part of the
/// checkpoint contract, so iteration is always deterministic.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: IndexMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Total scalars over names starting with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn absorb(&mut self, other: Params) {
        for (k, v) in other.map {
            self.insert(k, v);
        }
    }

    /// Checks that all tensors hold finite values; returns the first
    /// offending name otherwise.
    pub fn find_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// He-style fan-in scaled normal init: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(shape, data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

/// Binds named parameters onto a tape, at most once per name, and collects
/// their gradients afterwards.
#[derive(Default)]
pub struct Binder {
    ids: IndexMap<String, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf node for `name`, creating it on first use.
    pub fn get(&mut self, tape: &mut Tape, params: &Params, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = tape.leaf(params.expect(name).clone());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    /// Pre-binds an existing tape node under `name`. Gradient checks use
    /// this to route parameter leaves they created themselves.
    pub fn insert_bound(&mut self, name: &str, id: NodeId) {
        self.ids.insert(name.to_string(), id);
    }

    /// Drains gradients for every bound parameter. Parameters that did not
    /// influence the loss are omitted.
    pub fn collect_grads(&self, grads: &mut Grads) -> IndexMap<String, ArrayD<f64>> {
        let mut out = IndexMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = grads.take(id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
