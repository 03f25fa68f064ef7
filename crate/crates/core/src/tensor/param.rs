use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is consumed, which decides how its gradient is stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Used whole; receives a dense gradient.
    Dense,
    /// Embedding table: gathered by row, row 0 is the frozen padding row.
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if kind == ParamKind::Embedding && value.rank() != 2 {
            return Err(Error::dim(
                "param",
                format!("embedding `{name}` must be rank 2, got {:?}", value.shape()),
            ));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        self.by_name.insert(name.to_string(), id);
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

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradient of one parameter: dense, or a sparse set of touched rows.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Vec<T>),
    Rows { dim: usize, rows: BTreeMap<usize, Vec<T>> },
}

impl<T: Scalar> ParamGrad<T> {
    /// Dense view with the given total length (materializes sparse rows).
    pub fn to_dense(&self, numel: usize) -> Vec<T> {
        match self {
            ParamGrad::Dense(g) => g.clone(),
            ParamGrad::Rows { dim, rows } => {
                let mut out = vec![T::zero(); numel];
                for (&r, g) in rows {
                    out[r * dim..(r + 1) * dim].copy_from_slice(g);
                }
                out
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(g) => g.iter().all(|v| v.is_finite()),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().all(|v| v.is_finite()),
        }
    }
}

/// Parameter gradients collected by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, ParamGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, g: &[T]) {
        match self.grads.get_mut(&id) {
            Some(ParamGrad::Dense(acc)) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            Some(sparse @ ParamGrad::Rows { .. }) => {
                let mut acc = sparse.to_dense(g.len());
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
                *sparse = ParamGrad::Dense(acc);
            }
            None => {
                self.grads.insert(id, ParamGrad::Dense(g.to_vec()));
            }
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, dim: usize, row: usize, g: &[T]) {
        let entry = self.grads.entry(id).or_insert_with(|| ParamGrad::Rows {
            dim,
            rows: BTreeMap::new(),
        });
        match entry {
            ParamGrad::Rows { rows, .. } => {
                let acc = rows.entry(row).or_insert_with(|| vec![T::zero(); dim]);
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            ParamGrad::Dense(acc) => {
                for (a, &v) in acc[row * dim..(row + 1) * dim].iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
}
