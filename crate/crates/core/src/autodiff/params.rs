use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

/// Named trainable tensors, each paired with a gradient accumulator of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("parameter", format!("duplicate name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = value.zeros_like();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<R>] {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    /// Add `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<R>) -> Result<()> {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(
                    "accumulate",
                    format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), g.shape()),
                ));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in p.value.data() {
                v.to_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<R> {
    pub(crate) entries: Vec<(ParamId, Tensor<R>)>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }
}
