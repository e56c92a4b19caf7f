use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter storage. Insertion order is the canonical order used by
/// checkpoints and the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        tensor.set_trainable(trainable);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).trainable()).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.get(id).trainable()).collect()
    }

    /// Names of trainable parameters, in store order.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, _, t)| t.trainable())
            .map(|(_, n, _)| n)
            .collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable())
            .map(|t| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.zero_grad());
    }

    /// Replaces the values of an existing parameter, keeping its flags.
    pub fn set_values(&mut self, id: ParamId, values: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if values.len() != t.numel() {
            return Err(Error::Shape {
                op: "set_values",
                lhs: t.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}
