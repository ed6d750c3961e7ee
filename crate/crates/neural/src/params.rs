//! Named parameter registry and its binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Whether a parameter serves both branches or only the interim branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamTag {
    Shared,
    Cross,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tag: ParamTag,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn add(&mut self, name: &str, tag: ParamTag, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NeuralError::Config(format!("parameter {name} registered twice")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tag,
            value,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn tag(&self, name: &str) -> Option<ParamTag> {
        self.index.get(name).map(|&i| self.params[i].tag)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Scalar parameter count carrying `tag`.
    pub fn count(&self, tag: ParamTag) -> usize {
        self.params.iter().filter(|p| p.tag == tag).map(|p| p.value.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Leaf variables for every parameter, in registration order.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        Bound {
            tape,
            registry: self,
            vars,
        }
    }
}

/// Parameters of a registry placed on a tape.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    registry: &'t Registry,
    vars: Vec<Var>,
}

impl<'t> Bound<'t> {
    /// Variable for `name`. Names are produced by the same code that
    /// registers them, so a miss is a programming error.
    pub fn p(&self, name: &str) -> Var {
        match self.registry.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unregistered parameter {name}"),
        }
    }

    /// Binds `registry` to existing tape variables, one per parameter in
    /// registration order.
    pub fn from_vars(tape: &'t Tape, registry: &'t Registry, vars: Vec<Var>) -> Result<Bound<'t>> {
        if vars.len() != registry.len() {
            return Err(NeuralError::Shape(format!("{} variables for {} parameters", vars.len(), registry.len())));
        }
        Ok(Bound { tape, registry, vars })
    }

    pub fn has(&self, name: &str) -> bool {
        self.registry.position(name).is_some()
    }

    /// Gradient per parameter in registration order; zeros where unused.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.registry
            .iter()
            .zip(&self.vars)
            .map(|(p, &v)| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.len()],
            })
            .collect()
    }
}

/// Gaussian tensor with standard deviation `std`.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("sized by shape")
}
