use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::numerics::rng::{checksum_f64, RngState};
use crate::numerics::tensor::Tensor;

static NEXT_GROUP: AtomicU32 = AtomicU32::new(1);

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    group: u32,
    index: u32,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

/// Ordered collection of named trainable tensors.
///
/// Each store gets a process-unique group tag so gradients coming out of a
/// graph that mixes several models route back to the right store.
#[derive(Debug)]
pub struct ParamStore {
    group: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore { group: self.group, names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { group: NEXT_GROUP.fetch_add(1, Ordering::Relaxed), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId { group: self.group, index: (self.tensors.len() - 1) as u32 }
    }

    /// Glorot-uniform matrix in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut RngState) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.add(name, Tensor::new(&[rows, cols], data).expect("sized"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.group == self.group && (id.index as usize) < self.tensors.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert!(self.owns(id), "parameter handle from another store");
        &self.tensors[id.index as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(self.owns(id), "parameter handle from another store");
        &mut self.tensors[id.index as usize]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ParamId { group: self.group, index: i as u32 })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(move |i| ParamId { group: self.group, index: i as u32 })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
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

    /// Replaces the tensor stored under `name`, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{}` expects {:?}, got {:?}", name, self.tensors[i].shape(), value.shape()),
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Copies every tensor from `other` (matched by name).
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!("expected {} parameter blocks, found {}", self.len(), other.len())));
        }
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64(self.tensors.iter().flat_map(|t| t.data().iter().copied()))
    }
}
