use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Non-trainable entries hold buffers such
/// as batch-norm running statistics and never carry a gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = trainable.then(|| vec![T::zero(); tensor.numel()]);
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            grad,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        if let Some(g) = self.params[id.0].grad.as_mut() {
            g.iter_mut().zip(delta).for_each(|(a, &d)| *a += d);
        }
    }

    /// Overwrites a buffer or parameter value in place.
    pub fn set_values(&mut self, id: ParamId, values: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.numel() != values.len() {
            return Err(Error::Shape(format!(
                "{}: {} values for {:?}",
                p.name,
                values.len(),
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, values) in updates {
            self.set_values(id, &values)?;
        }
        Ok(())
    }
}
