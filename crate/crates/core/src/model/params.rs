use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Euclidean,
    /// Rows are points on the hyperboloid.
    Manifold,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Euclidean => 0,
            ParamKind::Manifold => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(ParamKind::Euclidean),
            1 => Some(ParamKind::Manifold),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub kind: ParamKind,
    /// Receives decoupled weight decay.
    pub decay: bool,
    /// Updated by the optimizer.
    pub trainable: bool,
}

/// Ordered, named collection of learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Param) -> Result<usize> {
        if self.index.contains_key(&p.name) {
            return Err(Error::contract(format!("duplicate parameter {}", p.name)));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("no parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        let i = self.position(name).ok_or_else(|| Error::contract(format!("no parameter {name}")))?;
        Ok(&mut self.params[i].value)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `tape`, as leaves when `trainable` else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    /// Wraps caller-created tape nodes, one per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("no parameter {name}")))
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    })
}

/// Adds `{name}.w` (`inp x out`) and `{name}.b` (`1 x out`) with uniform
/// `1/sqrt(inp)` initialization, or zeros when `zero` is set.
pub(crate) fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    inp: usize,
    out: usize,
    zero: bool,
) -> Result<()> {
    let bound = if zero { 0.0 } else { 1.0 / (inp as f64).sqrt() };
    store.insert(Param {
        name: format!("{name}.w"),
        value: uniform(rng, inp, out, bound),
        kind: ParamKind::Euclidean,
        decay: true,
        trainable: true,
    })?;
    store.insert(Param {
        name: format!("{name}.b"),
        value: uniform(rng, 1, out, bound),
        kind: ParamKind::Euclidean,
        decay: true,
        trainable: true,
    })?;
    Ok(())
}

/// `x W + b` on the tape.
pub fn linear(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row_bias(xw, b)
}
