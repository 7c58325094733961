//! Named parameter registry.
//!
//! Every learned weight lives here under a unique name, in insertion order.
//! The order is stable, which makes checkpoint serialization and optimizer
//! sweeps deterministic.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::collections::HashMap;

pub struct ParamRegistry<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamRegistry<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamRegistry<T> {
    fn clone(&self) -> Self {
        ParamRegistry {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn new() -> Self {
        ParamRegistry { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor under `name` and returns its index.
    /// Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        tensor.requires_grad = true;
        let idx = self.tensors.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    /// Iterates (name, tensor) in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut reg = ParamRegistry::<f64>::new();
        let a = reg.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        let b = reg.insert("b", Tensor::zeros(vec![2])).unwrap();
        assert_eq!(reg.lookup("w"), Some(a));
        assert_eq!(reg.lookup("b"), Some(b));
        assert_eq!(reg.name(a), "w");
        assert_eq!(reg.scalar_count(), 6);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("w", Tensor::zeros(vec![1])).unwrap();
        let err = reg.insert("w", Tensor::zeros(vec![1])).unwrap_err();
        assert!(matches!(err, Error::DuplicateName(n) if n == "w"));
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut reg = ParamRegistry::<f32>::new();
        for name in ["z", "a", "m"] {
            reg.insert(name, Tensor::zeros(vec![1])).unwrap();
        }
        let names: Vec<&str> = reg.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }
}
