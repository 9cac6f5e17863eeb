//! Named parameter storage.
//!
//! A [`ParamStore`] is a `BTreeMap` from parameter name to [`Tensor`], so
//! every iteration — initialization, optimizer steps, checkpoint
//! serialization — visits parameters in the same (lexicographic) order.
//! That ordering is what makes training byte-for-byte reproducible.

use std::collections::btree_map;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "parameter {name:?} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    /// Lexicographic iteration — the only order anything in this crate uses.
    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Register a tensor drawn from N(0, std²).
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        self.insert(name, Tensor::new(shape, data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![T::zero(); n]));
    }

    pub fn init_ones(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![T::one(); n]));
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Convert every tensor to a different scalar type (values only; grads
    /// are dropped). Used to rerun a model under f64 for gradient checking.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            out.insert(name, t.cast());
        }
        out
    }
}
