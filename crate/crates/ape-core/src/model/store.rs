//! Named parameter storage with aliasing.
//!
//! Parameters live in slots; a name resolves to a slot index. Tying two
//! parameters means registering a second name for an existing slot, so both
//! views read and update the same memory and the optimizer visits it once.
//! The first name registered for a slot is its canonical name.

use indexmap::IndexMap;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone)]
struct Slot<S: Scalar> {
    tensor: Tensor<S>,
    decay: bool,
}

/// Insertion-ordered map from parameter names to shared slots.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<S: Scalar> {
    slots: Vec<Slot<S>>,
    names: IndexMap<String, usize>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            names: IndexMap::new(),
        }
    }

    /// Registers a fresh parameter and returns its slot index.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<S>,
        decay: bool,
    ) -> Result<usize, StoreError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(StoreError::Duplicate(name));
        }
        let idx = self.slots.len();
        self.slots.push(Slot {
            tensor: tensor.with_grad(true),
            decay,
        });
        self.names.insert(name, idx);
        Ok(idx)
    }

    /// Registers `name` as another view of `target`'s slot.
    pub fn alias(&mut self, name: impl Into<String>, target: &str) -> Result<usize, StoreError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(StoreError::Duplicate(name));
        }
        let idx = self.slot_of(target)?;
        self.names.insert(name, idx);
        Ok(idx)
    }

    pub fn slot_of(&self, name: &str) -> Result<usize, StoreError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| StoreError::Unknown(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, StoreError> {
        Ok(&self.slots[self.slot_of(name)?].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, StoreError> {
        let idx = self.slot_of(name)?;
        Ok(&mut self.slots[idx].tensor)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, idx: usize) -> &Tensor<S> {
        &self.slots[idx].tensor
    }

    pub fn slot_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.slots[idx].tensor
    }

    /// Whether weight decay applies to this slot.
    pub fn decays(&self, idx: usize) -> bool {
        self.slots[idx].decay
    }

    pub fn set_decay(&mut self, idx: usize, decay: bool) {
        self.slots[idx].decay = decay;
    }

    /// All registered names with their slots, in registration order.
    pub fn names(&self) -> impl Iterator<Item = (&str, usize)> {
        self.names.iter().map(|(n, &i)| (n.as_str(), i))
    }

    /// The first name registered for each slot, in slot order.
    pub fn canonical_names(&self) -> Vec<&str> {
        let mut out: Vec<Option<&str>> = vec![None; self.slots.len()];
        for (name, &idx) in &self.names {
            if out[idx].is_none() {
                out[idx] = Some(name.as_str());
            }
        }
        out.into_iter().map(|n| n.expect("every slot named")).collect()
    }

    /// Name groups that share storage (two or more names), canonical name
    /// first, in slot order.
    pub fn tie_groups(&self) -> Vec<Vec<String>> {
        let mut groups: Vec<Vec<String>> = vec![Vec::new(); self.slots.len()];
        for (name, &idx) in &self.names {
            groups[idx].push(name.clone());
        }
        groups.retain(|g| g.len() > 1);
        groups
    }

    /// Distinct trainable scalars (each tied group counts once).
    pub fn count_parameters(&self) -> usize {
        self.slots.iter().map(|s| s.tensor.numel()).sum()
    }
}
