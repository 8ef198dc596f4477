use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, Tensor, Var};

/// Named trainable tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Puts every parameter on the graph. With `trainable`, they become
    /// differentiable leaves whose gradients [`ParamStore::collect_grads`]
    /// can read back.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.bind_with(g, |_| trainable)
    }

    /// Like [`ParamStore::bind`], choosing per parameter name.
    pub fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let mut leaf = t.clone();
                leaf.grad = None;
                leaf.requires_grad = trainable(name);
                (name.clone(), g.leaf(leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients accumulated on `g` into each parameter's `grad`.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for (name, var) in &bound.vars {
            let Some(src) = g.grad(*var) else { continue };
            let t = self.get_mut(name).expect("bound from this store");
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(src).for_each(|(a, d)| *a += d),
                None => t.grad = Some(src.to_vec()),
            }
        }
    }

    pub fn to_checkpoint(&self, meta: String) -> Checkpoint {
        Checkpoint {
            meta,
            arrays: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.grad = None;
                    t.requires_grad = false;
                    (n.clone(), t)
                })
                .collect(),
        }
    }

    /// Overwrites every parameter from `ck`, which must hold exactly the same
    /// names and shapes.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.arrays.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model expects {}",
                ck.arrays.len(),
                self.entries.len()
            )));
        }
        for (name, t) in &ck.arrays {
            let cur = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected array {name}")))?;
            if cur.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        for (name, t) in &ck.arrays {
            self.insert(name.clone(), t.clone());
        }
        Ok(())
    }
}

/// Graph handles of a [`ParamStore`] bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.try_var(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Points `name` at another graph node, e.g. a probe leaf in a gradient
    /// check. Returns `false` if `name` is not bound.
    pub fn set(&mut self, name: &str, var: Var) -> bool {
        match self.vars.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => {
                slot.1 = var;
                true
            }
            None => false,
        }
    }
}
