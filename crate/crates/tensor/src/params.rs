use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named tensor bundle (model weights, gradients, optimizer moments).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter names mapped to their leaves on a particular tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Leaf for `name`; panics on unknown names since those are wiring bugs.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name:?} not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Place every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Place every tensor on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Collect gradients for every bound parameter; parameters that received
    /// no gradient flow get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<T>) -> ParamSet<T> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let g = bound
                    .try_get(k)
                    .and_then(|var| grads.get(var).cloned())
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()));
                (k.clone(), g)
            })
            .collect();
        ParamSet { tensors }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copy tensors whose names start with `prefix` from `src`, requiring an
    /// exact shape match. Returns the copied names; errors list every missing
    /// or mismatched name.
    pub fn load_prefix(&mut self, src: &ParamSet<T>, prefix: &str) -> Result<Vec<String>> {
        let mut missing = Vec::new();
        let mut loaded = Vec::new();
        for (name, dst) in self.tensors.iter_mut().filter(|(k, _)| k.starts_with(prefix)) {
            match src.get(name) {
                Some(t) if t.shape() == dst.shape() => {
                    *dst = t.clone();
                    loaded.push(name.clone());
                }
                Some(t) => {
                    return Err(shape_err(
                        "load_prefix",
                        format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), dst.shape()),
                    ))
                }
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(TensorError::Missing(missing));
        }
        Ok(loaded)
    }
}
