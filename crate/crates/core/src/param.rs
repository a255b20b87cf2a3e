//! Named trainable parameters.

use crate::tensor::{Real, Tensor};

/// One trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<E: Real> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub requires_update: bool,
}

impl<E: Real> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            requires_update: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(E::ZERO);
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub usize);

/// Flat, ordered collection of parameters. The ordering is the single source
/// of truth for optimizer state, checkpoints, and tape binding.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Real> {
    params: Vec<Parameter<E>>,
}

impl<E: Real> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>) -> PId {
        self.params.push(Parameter::new(name, value));
        PId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: PId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.zero_grad();
        }
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<E>> {
        self.params.iter().find(|p| p.name == name)
    }
}
