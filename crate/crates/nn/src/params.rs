use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable weight.
    Weight,
    /// Non-trainable state (e.g. batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered, named collection of a model's weights and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn weight(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().filter(|p| p.kind == ParamKind::Weight).map(|p| p.value.len()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn num_weights_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// Replace a tensor's contents, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(NnError::Shape(format!("parameter {name}: expected {:?}, got {:?}", self.entries[i].value.shape(), value.shape())));
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Put every weight on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight => Some(tape.leaf(p.value.clone(), requires_grad)),
                ParamKind::Buffer => None,
            })
            .collect();
        Binding { vars }
    }
}

/// Tape variables for the weights of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

/// `U(-bound, bound)` initialised tensor.
pub fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::lit(dist.sample(rng)))
}

/// Default fan-in initialisation for conv/linear weights and biases.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}
