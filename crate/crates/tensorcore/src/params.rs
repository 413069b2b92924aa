use std::collections::HashMap;

use crate::{Checkpoint, Result, Scalar, TensorData, TensorError};

/// Named, insertion-ordered parameter set. The order is part of the training
/// contract: optimizer state, gradient collection, and checkpoint bytes all
/// follow it.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<TensorData<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData<T>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &TensorData<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut TensorData<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[TensorData<T>] {
        &self.tensors
    }

    /// Flatten into checkpoint entries, prefixing every name.
    pub fn export(&self, prefix: &str, out: &mut Checkpoint) {
        for (name, tensor) in self.iter() {
            out.insert(format!("{prefix}{name}"), tensor.to_f32());
        }
    }

    /// Replace every tensor from prefixed checkpoint entries. Shapes must
    /// match the current layout exactly.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for id in 0..self.tensors.len() {
            let full = format!("{prefix}{}", self.names[id]);
            let entry = ckpt
                .get(&full)
                .ok_or_else(|| TensorError::UnknownParam(full.clone()))?;
            if entry.shape() != self.tensors[id].shape() {
                return Err(TensorError::CheckpointFormat(format!(
                    "{full}: shape {:?} does not match expected {:?}",
                    entry.shape(),
                    self.tensors[id].shape()
                )));
            }
            self.tensors[id] = entry.map(|v| T::cast(v as f64));
        }
        Ok(())
    }
}
