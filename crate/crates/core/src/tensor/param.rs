use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learnable weights are optimized and counted; buffers (batchnorm running
/// statistics) are only checkpointed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Named parameter collection owned by a model. Insertion order is stable and
/// defines checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            grad: value.zeros_like(),
            value,
            trainable: kind == ParamKind::Weight,
            kind,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<T>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Total scalar count of learnable weights, independent of freeze state.
    pub fn count_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

const NAME_CRC: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// Per-parameter generator derived from `(seed, name)`, so a parameter's
/// initial value does not depend on how many parameters were built before it.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ NAME_CRC.checksum(name.as_bytes()))
}

/// Uniform `(-bound, bound)` initialization.
pub fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-bound..bound)))
}
