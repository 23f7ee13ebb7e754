use indexmap::IndexMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new entry. Names must be unique and values finite.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        if !value.all_finite() {
            return Err(Error::invalid(format!("parameter {name:?} has non-finite values")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.rows, v.cols))).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Registers every entry on `tape` as a differentiable variable.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars { vars: self.entries.iter().map(|(k, v)| (k.clone(), tape.var(v.clone()))).collect() }
    }

    /// Checks that `other` has the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid("parameter stores have different entry counts"));
        }
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::invalid(format!(
                        "shape mismatch for {name:?}: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {name:?}"))),
            }
        }
        Ok(())
    }
}

/// Tape variables for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no tape variable for parameter {name:?}"))
    }

    /// Collects per-entry gradients into a store shaped like the parameters.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        ParamStore { entries: self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect() }
    }
}

/// Evaluates `objective` on a fresh tape and returns its value with the
/// gradient of every parameter.
pub fn grad(params: &ParamStore, objective: impl FnOnce(&mut Tape, &ParamVars) -> Var) -> (f64, ParamStore) {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let loss = objective(&mut tape, &vars);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss);
    (value, vars.gradients(&grads))
}
