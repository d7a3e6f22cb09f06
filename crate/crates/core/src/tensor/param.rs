use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Network weights, trained on the training shard.
    Theta,
    /// Architecture logits, trained on the validation shard.
    Alpha,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
}

/// Owner of every trainable tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.group(id) == group)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self, group: ParamGroup) -> usize {
        self.ids_in(group).map(|id| self.value(id).numel()).sum()
    }

    /// Copies every value of `group` from `other`, matching by name.
    pub fn load_group_from(&mut self, other: &ParamStore<T>, group: ParamGroup) -> Result<()> {
        for id in self.ids_in(group).collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let src = other
                .find(&name)
                .ok_or_else(|| Error::schema(&name, "parameter missing from source"))?;
            if other.value(src).shape() != self.value(id).shape() {
                return Err(Error::schema(
                    &name,
                    format!(
                        "shape {:?} does not match {:?}",
                        other.value(src).shape(),
                        self.value(id).shape()
                    ),
                ));
            }
            *self.value_mut(id) = other.value(src).clone();
        }
        Ok(())
    }
}

/// Gradient accumulators, one optional slot per parameter.
///
/// Slots persist across layers and batches until an optimizer consumes them.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => {
                *slot = Some(grad.clone());
                Ok(())
            }
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Ids with a populated accumulator, ascending.
    pub fn populated(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.is_finite())
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }
}
