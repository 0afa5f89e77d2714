use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable and weight-decayed (conv/linear weights, gate scale).
    Weight,
    /// Learnable, excluded from weight decay (BN affine, biases).
    NoDecay,
    /// Persistent state, never updated by the optimizer (BN running
    /// statistics, a frozen gate scale).
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Owns every named tensor of a model. Layers keep [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal init: N(0, 2/fan_in).
    pub fn add_he_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let value = Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)));
        self.add(name, value, ParamKind::Weight)
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

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.learnable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Puts the parameter on the tape (once per tape) and returns its leaf.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.bind(id.0, || (p.value.clone(), p.kind.learnable()))
    }

    pub fn to_named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored tensor
    /// must be present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = entries.iter().find(|(n, _)| *n == p.name).ok_or_else(|| Error::Format {
                format: "checkpoint",
                detail: format!("missing tensor `{}`", p.name),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
        }
    }
}
