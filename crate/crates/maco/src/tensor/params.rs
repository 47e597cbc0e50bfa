//! Named parameter storage and per-pass graph binding.
//!
//! Parameters live in a [`ParamStore`] keyed by slash-separated layer paths
//! (deterministic iteration via `BTreeMap`). Each forward pass binds the
//! store onto a fresh graph with [`BoundParams::bind`], looks variables up
//! by path, and after `backward` copies gradients back into the store.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{GradBuffer, Graph, Scalar, Tensor, Var};

/// Trainable tensors keyed by layer path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Scalar> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::invalid("ParamStore::insert", format!("duplicate parameter path {path:?}")));
        }
        self.params.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<F>> {
        self.params.get(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<F>> {
        self.params.get_mut(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Path-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Precision-lifted copy (gradients dropped).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }
}

/// Parameters bound as leaves of one graph.
pub struct BoundParams<'g, F: Scalar> {
    vars: BTreeMap<String, Var<'g, F>>,
}

impl<'g, F: Scalar> BoundParams<'g, F> {
    /// Record every store entry as a leaf on `graph`.
    pub fn bind(graph: &'g Graph<F>, store: &ParamStore<F>) -> Self {
        let vars = store.iter().map(|(path, t)| (path.clone(), graph.leaf(t.clone()))).collect();
        BoundParams { vars }
    }

    pub fn var(&self, path: &str) -> Result<Var<'g, F>> {
        self.vars.get(path).copied().ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    /// Copy gradients out of a backward pass into the store. Parameters the
    /// loss never reached get an explicit zero gradient.
    pub fn write_grads(&self, grads: &mut GradBuffer<F>, store: &mut ParamStore<F>) -> Result<()> {
        for (path, var) in &self.vars {
            let tensor = store.get_mut(path)?;
            let g = grads
                .take(*var)
                .unwrap_or_else(|| vec![F::zero(); tensor.numel()]);
            tensor.set_grad(g)?;
        }
        Ok(())
    }
}
