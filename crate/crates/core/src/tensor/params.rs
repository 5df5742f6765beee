use std::collections::HashMap;

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on `g`, as gradient leaves when `trainable`.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        ParamVars {
            names: self.names.clone(),
            vars,
        }
    }

    /// Gradient of each parameter in store order, zero where none flowed.
    pub fn collect_grads(&self, vars: &ParamVars, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&vars.vars)
            .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles for the parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
