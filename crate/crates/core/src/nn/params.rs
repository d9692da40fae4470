use std::sync::Arc;

use indexmap::IndexMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Role of a parameter; decides initialization and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear weight: truncated normal init, decayed.
    Weight,
    /// Linear bias: zero init, not decayed.
    Bias,
    /// LayerNorm gain: one init, not decayed.
    NormScale,
    /// LayerNorm shift: zero init, not decayed.
    NormShift,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    tensor: Arc<Tensor<T>>,
    kind: ParamKind,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn decays(&self) -> bool {
        self.kind.decays()
    }
}

/// Insertion-ordered registry of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Adds a zero-filled parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        let tensor = Tensor::zeros(shape.to_vec()).with_requires_grad();
        let (idx, _) = self.entries.insert_full(
            name,
            ParamEntry {
                tensor: Arc::new(tensor),
                kind,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).expect("valid id").0
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &*e.tensor)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    /// Mutable access; copies the tensor first if a bound var still shares it.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, e))| (ParamId(i), n.as_str(), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Replaces a parameter's values, keeping its shape and grad flag.
    pub fn assign(&mut self, id: ParamId, values: &Tensor<T>) -> Result<()> {
        let t = self.tensor_mut(id);
        if t.shape() != values.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: t.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    /// Exposes every parameter as a var: tracked leaves on `tape`, constants otherwise.
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bindings<T> {
        let vars = self
            .entries
            .values()
            .map(|e| match tape {
                Some(t) => t.leaf_shared(Arc::clone(&e.tensor)),
                None => Var::from_shared(Arc::clone(&e.tensor)),
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the tape gradients of `bindings` into each tensor's `grad`.
    pub fn collect_grads(&mut self, bindings: &Bindings<T>) {
        for (entry, var) in self.entries.values_mut().zip(&bindings.vars) {
            if let Some(g) = var.grad() {
                Arc::make_mut(&mut entry.tensor).accumulate_grad(g.data());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            if entry.tensor.grad().is_some() {
                Arc::make_mut(&mut entry.tensor).zero_grad();
            }
        }
    }

    /// Same names and values at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: Arc::new(e.tensor.cast()),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bit-level equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.tensor.bit_eq(&b.tensor))
    }
}

/// Vars for every parameter of a store, indexed by [`ParamId`].
pub struct Bindings<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bindings<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}
