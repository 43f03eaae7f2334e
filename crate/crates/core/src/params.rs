//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut index = HashMap::with_capacity(self.entries.len());
        let mut vars = Vec::with_capacity(self.entries.len());
        for (i, (name, t)) in self.entries.iter().enumerate() {
            vars.push(tape.leaf(t.clone(), trainable));
            index.insert(name.clone(), i);
        }
        Bound { vars, index }
    }

    /// Fills a tensor uniformly in `[-bound, bound]`.
    pub(crate) fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.insert(name, t)
    }
}

/// Tape handles for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Accumulated gradients in store order; untouched parameters get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.numel(), 2);
    }

    #[test]
    fn bind_resolves_names() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], 3.0)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let w = b.var("w").unwrap();
        assert_eq!(tape.value(w).data(), &[3.0, 3.0]);
        assert!(b.var("nope").is_err());
        assert_eq!(b.grads(&tape), vec![vec![0.0, 0.0]]);
    }
}
