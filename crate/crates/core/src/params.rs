//! Named trainable parameters and their per-graph bindings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Trainable tensors keyed by dotted path (`"geotext.l2.prompt"`).
///
/// Iteration order is the sorted name order, which keeps optimizer updates
/// and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `t` as trainable under `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let mut t = t;
        t.set_requires_grad(true);
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        t.data_mut().iter_mut().for_each(|v| *v = value);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.leaf(t)))
                .collect(),
        }
    }

    /// Accumulates gradients from a backward pass into each tensor's `grad`.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, var) in &bound.vars {
            if let Some(t) = self.tensors.get_mut(name) {
                grads.write_to(*var, t)?;
            }
        }
        Ok(())
    }

    /// L2 norm of the gradients of parameters under `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameter name → graph variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_marks_trainable() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::ones(&[2]));
        assert!(ps.get("w").unwrap().requires_grad());
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut ps = ParamStore::new();
        ps.insert("used", Tensor::ones(&[3]));
        ps.insert("unused", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let loss = g.sum(b.get("used").unwrap());
        let grads = g.backward(loss).unwrap();
        ps.accumulate(&b, &grads).unwrap();
        assert_eq!(ps.get("used").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(ps.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }
}
