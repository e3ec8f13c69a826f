//! Named trainable parameters.
//!
//! Layers hold [`ParamId`]s, never tensors. A forward pass binds every
//! registered tensor to a tape leaf once and looks them up by id, which lets
//! the same model run in `f32` for training and `f64` for gradient checks.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FctError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: IndexMap<String, Tensor<f32>>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(FctError::invalid(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<f32>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.params.values_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Every parameter converted to `T`, in registry order.
    pub fn cast<T: Element>(&self) -> Vec<Tensor<T>> {
        self.params.values().map(Tensor::cast).collect()
    }

    /// Records every parameter as a tape leaf and returns the handles in
    /// registry order.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .values()
            .map(|t| tape.leaf(t.cast(), requires_grad))
            .collect()
    }
}

/// Parameter allocation context used while building layers.
pub struct ParamInit<'a> {
    registry: &'a mut ParamRegistry,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(registry: &'a mut ParamRegistry, rng: &'a mut ChaCha8Rng) -> Self {
        ParamInit {
            registry,
            rng,
            prefix: String::new(),
        }
    }

    /// Child context whose parameter names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamInit<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamInit {
            registry: self.registry,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<f32>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.registry.insert(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound) as f32);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape))
    }
}
