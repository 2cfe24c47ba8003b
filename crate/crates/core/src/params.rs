//! Named parameter registry and per-step tape binding.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, and in the `Vec<Var>` returned by `bind`.
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `±bound`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and runs.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Its initial value depends only on `seed` and
    /// `name`, so models of different depth share the weights they have in
    /// common.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let mut r = rng::stream(seed, &[0x9A2A, name_hash(name)]);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Const(c) => Tensor::full(shape, c),
            Init::Uniform(b) => Tensor::uniform(shape, b, &mut r),
            Init::Normal(s) => Tensor::randn(shape, s, &mut r),
        };
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value with the same-named value from `other`,
    /// checking that the registries agree exactly.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::State("parameter registries differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::State("parameter shapes differ".into()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Records every parameter on the tape, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if tracked {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}
