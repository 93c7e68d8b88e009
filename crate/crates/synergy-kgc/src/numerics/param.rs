//! Named trainable parameters with persistent gradient buffers.

use std::collections::HashMap;

use crate::error::{KgcError, Result};
use crate::numerics::tensor::Tensor;

/// Stable index into a [`ParamSet`]. Ids are dense and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters keep their value through optimizer steps and
    /// receive no weight decay; gradients are still accumulated and cleared.
    pub trainable: bool,
}

/// Registry of all model parameters, the single owner of values and grads.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Accumulates `delta` into the gradient of `id`, rejecting non-finite
    /// contributions with the parameter's name in the error.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !delta.all_finite() {
            return Err(KgcError::Numeric(format!(
                "non-finite gradient for parameter `{}`",
                p.name
            )));
        }
        p.grad.add_scaled(delta, 1.0);
        Ok(())
    }

    /// Euclidean norm over the gradients of all trainable parameters.
    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every trainable gradient in place.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            if p.trainable {
                p.grad.scale(s);
            }
        }
    }

    /// Snapshot of all gradients in id order, for gradient checking.
    pub fn grad_snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }
}
