//! Named parameter storage and per-tape bindings.

use std::ops::Index;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{PftError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        let (idx, _) = self.params.insert_full(name, value);
        ParamId(idx)
    }

    /// Gaussian-initialised parameter.
    pub fn randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).expect("param id")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Registers every parameter as a borrowed trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bindings {
        Bindings(self.params.values().map(|t| tape.param(t)).collect())
    }

    /// Registers every parameter as a frozen leaf (inference).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> Bindings {
        Bindings(self.params.values().map(|t| tape.input(t.clone(), false)).collect())
    }

    /// Replace every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other
                .get(name)
                .ok_or_else(|| PftError::Checkpoint(format!("missing parameter '{name}'")))?;
            if src.shape() != t.shape() {
                return Err(PftError::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Weight/bias pair of a dense layer; weight stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: store.randn(format!("{name}.weight"), &[d_in, d_out], std, rng),
            bias: store.zeros(format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, b[self.weight], b[self.bias])
    }
}

/// Convolution weight `[C_out, C_in / groups, k, k]` plus bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        groups: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let std = (gain / fan_in as f64).sqrt();
        Self {
            weight: store.randn(format!("{name}.weight"), &[c_out, c_in / groups, k, k], std, rng),
            bias: store.zeros(format!("{name}.bias"), &[c_out]),
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, b[self.weight], Some(b[self.bias]), self.groups)
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[channels]),
            bias: store.zeros(format!("{name}.bias"), &[channels]),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, b[self.gain], b[self.bias])
    }
}
