use std::collections::HashMap;

use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        let pos = self.index.remove(name)?;
        let (_, t) = self.entries.remove(pos);
        for (i, (n, _)) in self.entries.iter().enumerate().skip(pos) {
            self.index.insert(n.clone(), i);
        }
        Some(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copy every parameter into `graph` as a leaf. Parameters whose name is
    /// not accepted by `trainable` enter as constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                t.requires_grad = trainable(n);
                (n.clone(), graph.leaf(t))
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter name → graph node mapping produced by [`ParamStore::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))
    }

    /// Collect gradients of every bound parameter that has one.
    pub fn grads<T: Float>(&self, graph: &Graph<T>) -> HashMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| graph.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected_and_remove_reindexes() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        p.insert("b", Tensor::zeros(&[2])).unwrap();
        p.insert("c", Tensor::zeros(&[3])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        p.remove("a");
        assert_eq!(p.get("c").unwrap().numel(), 3);
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["b", "c"]);
    }
}
