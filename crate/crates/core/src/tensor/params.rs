use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Named learnable tensors in registration order, plus the frozen subset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: HashSet<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    /// Replaces a tensor, keeping its shape fixed.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name)?;
        if self.tensors[id].shape() != tensor.shape() {
            return shape_err(
                "ParamStore::set",
                format!(
                    "`{name}` has shape {:?}, got {:?}",
                    self.tensors[id].shape(),
                    tensor.shape()
                ),
            );
        }
        self.tensors[id] = tensor;
        Ok(())
    }

    /// Replaces a tensor with one of a different shape (vocabulary growth).
    pub fn resize(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name)?;
        self.tensors[id] = tensor;
        Ok(())
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        let id = self.id(name)?;
        self.frozen.insert(id);
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let ids: Vec<usize> = (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect();
        let count = ids.len();
        self.frozen.extend(ids);
        count
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        let mut ids: Vec<usize> = self.frozen.iter().copied().collect();
        ids.sort_unstable();
        ids.into_iter().map(|i| self.names[i].as_str()).collect()
    }
}

/// Gradients aligned with a [`ParamStore`]'s ids. Unreached params hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub(crate) fn from_vec(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.grads[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Result<&Tensor> {
        Ok(&self.grads[store.id(name)?])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return shape_err("ParamGrads::add_assign", "different parameter sets");
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return shape_err(
                    "ParamGrads::add_assign",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                );
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Seeded parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual linear-layer init.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Registers `{prefix}.w` (fan_in x fan_out) and optionally `{prefix}.b`.
    pub fn linear(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<()> {
        let w = self.fan_in_uniform(&[fan_in, fan_out], fan_in);
        store.insert(format!("{prefix}.w"), w)?;
        if bias {
            let b = self.fan_in_uniform(&[fan_out], fan_in);
            store.insert(format!("{prefix}.b"), b)?;
        }
        Ok(())
    }
}
