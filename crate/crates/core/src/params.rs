//! Named parameter storage and binding onto a tape.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial value rule for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Square identity matrix.
    Eye,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Parameter tensors keyed by stable dotted names, in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `specs`, drawing standard normals from `normal`.
    pub fn from_specs(specs: &[ParamSpec], mut normal: impl FnMut() -> f64) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let mut t = Tensor::zeros(&spec.shape);
            match spec.init {
                Init::Zeros => {}
                Init::Ones => t.data_mut().iter_mut().for_each(|x| *x = 1.0),
                Init::Normal(std) => t.data_mut().iter_mut().for_each(|x| *x = std * normal()),
                Init::Eye => match spec.shape.as_slice() {
                    [r, c] if r == c => t = Tensor::eye(*r),
                    _ => return Err(Error::arg(alloc::format!("{}: Eye init needs a square shape", spec.name))),
                },
            }
            store.insert(&spec.name, t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::arg(alloc::format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(alloc::format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another node, e.g. a probe input for gradient checks.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<Var> {
        match self.vars.get_mut(name) {
            Some(slot) => Ok(core::mem::replace(slot, var)),
            None => Err(Error::arg(alloc::format!("missing parameter {name}"))),
        }
    }

    /// Gradient per parameter name after [`Tape::backward`].
    pub fn grads<'t>(&self, tape: &'t Tape) -> BTreeMap<&str, &'t [f64]> {
        self.vars
            .iter()
            .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.as_str(), g)))
            .collect()
    }
}
