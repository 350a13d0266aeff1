use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named parameter with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) t: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self { name: name.into(), value, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.push(Param::new(name, value))
    }

    pub(crate) fn push(&mut self, param: Param) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter {}", param.name)));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
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

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Adds a gradient buffer into the parameters' gradients.
    pub fn accumulate(&mut self, grads: &GradBuffer, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if g.is_empty() {
                continue;
            }
            for (acc, x) in p.value.grad_mut().iter_mut().zip(g) {
                *acc += scale * x;
            }
        }
    }

    /// Empty gradient buffer aligned with this store.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer(vec![Vec::new(); self.params.len()])
    }

    /// Hex SHA-256 over names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &e in p.value.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in p.value.values() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sparse-by-parameter gradient buffer aligned with a [`ParamStore`]; an
/// empty slot means "no gradient for this parameter".
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer(pub(crate) Vec<Vec<f64>>);

impl GradBuffer {
    /// Mutable gradient slot for a parameter of `len` values.
    pub fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        let g = &mut self.0[id.0];
        if g.is_empty() {
            g.resize(len, 0.0);
        }
        g
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        let g = &self.0[id.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if b.is_empty() {
                continue;
            }
            if a.is_empty() {
                a.resize(b.len(), 0.0);
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Concatenation of all slots in store order (zeros for empty slots).
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_values());
        for (p, g) in store.params().iter().zip(&self.0) {
            if g.is_empty() {
                out.extend(std::iter::repeat(0.0).take(p.value.len()));
            } else {
                out.extend_from_slice(g);
            }
        }
        out
    }
}
