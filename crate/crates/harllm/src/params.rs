//! Named parameter registry with a trainable/frozen partition, plus staging
//! onto a tape for one forward/backward pass.

use std::collections::BTreeMap;

use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Parameters keyed by name; iteration order is always name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        let prev = self.entries.insert(name.to_string(), ParamEntry { value, trainable });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).value
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(entry.value.shape(), value.shape(), "shape change for `{name}`");
        entry.value = value;
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .trainable
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total element count over parameters whose name starts with `prefix`
    /// and whose trainable flag matches, when given.
    pub fn numel_where(&self, prefix: &str, trainable: Option<bool>) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| {
                k.starts_with(prefix) && trainable.map_or(true, |t| e.trainable == t)
            })
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Puts every parameter on the tape: trainable entries as gradient-tracked
    /// leaves, frozen entries as constants.
    pub fn stage(&self, tape: &mut Tape<T>) -> StagedParams {
        let mut nodes = BTreeMap::new();
        for (name, entry) in &self.entries {
            let id = tape.leaf(entry.value.clone(), entry.trainable);
            nodes.insert(name.clone(), id);
        }
        StagedParams { nodes }
    }

    /// Values as F32 tensors for checkpointing, keyed by name.
    pub fn to_f32_map(&self) -> BTreeMap<String, Tensor<f32>> {
        self.entries
            .iter()
            .map(|(k, e)| {
                let data: Vec<f32> = e.value.data().iter().map(|v| v.cast_f64() as f32).collect();
                (
                    k.clone(),
                    Tensor::new(e.value.shape().to_vec(), data).expect("same numel"),
                )
            })
            .collect()
    }

    /// Overwrites values from an F32 map. Every stored parameter must be
    /// present with a matching shape; unknown names are rejected.
    pub fn load_f32_map(&mut self, map: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for name in self.entries.keys() {
            if !map.contains_key(name) {
                return Err(Error::checkpoint(name, "missing from checkpoint"));
            }
        }
        self.load_f32_entries(map)
    }

    /// Overwrites only the named parameters. Every key must exist in the
    /// store with a matching shape.
    pub fn load_f32_entries(&mut self, map: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, t) in map {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::checkpoint(name.as_str(), "not a model parameter"))?;
            if t.shape() != entry.value.shape() {
                return Err(Error::checkpoint(
                    name.as_str(),
                    format!("shape {:?} does not match expected {:?}", t.shape(), entry.value.shape()),
                ));
            }
            let data: Vec<T> = t.data().iter().map(|&v| T::cast_from(v as f64)).collect();
            entry.value = Tensor::new(t.shape().to_vec(), data).expect("same numel");
        }
        Ok(())
    }
}

/// Name-to-node map for one staged pass.
pub struct StagedParams {
    nodes: BTreeMap<String, NodeId>,
}

impl StagedParams {
    pub fn has(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self.nodes.get(name).unwrap_or_else(|| panic!("unstaged parameter `{name}`"))
    }

    /// Pulls gradients for the named parameters out of the tape.
    /// Parameters the loss never touched yield no entry.
    pub fn grads<T: Scalar>(&self, tape: &mut Tape<T>, names: &[String]) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for name in names {
            if let Some(g) = tape.take_grad(self.node(name)) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
