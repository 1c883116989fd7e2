use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of a model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    EncPrefix,
    EncRecursion,
    EncPostfix,
    DecPrefix,
    DecRecursion,
    DecPostfix,
    Output,
    Lstm,
}

impl ParamGroup {
    pub fn is_recursion(self) -> bool {
        matches!(self, ParamGroup::EncRecursion | ParamGroup::DecRecursion)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Named parameter tensors of one model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor<T>,
    ) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        id
    }

    /// Adds a tensor filled uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut t = Tensor::zeros(shape)?;
        if bound > 0.0 {
            for v in t.values_mut() {
                *v = T::from_f64(rng.gen_range(-bound..=bound));
            }
        }
        Ok(self.add(name, group, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds gradients collected from a graph into the parameter tensors.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (id, g) in &grads.grads {
            self.entries
                .get_mut(id.0)
                .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))?
                .tensor
                .accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces every gradient with the one in `grads`; parameters missing
    /// from `grads` end up with no gradient.
    pub fn set_grads(&mut self, grads: ParamGrads<T>) -> Result<()> {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
        for (id, g) in grads.grads {
            self.entries
                .get_mut(id.0)
                .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))?
                .tensor
                .set_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Parameter gradients extracted from a graph after backward.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T> {
    pub grads: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}
