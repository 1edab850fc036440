//! Dense tensors and the named parameter store.
//!
//! Tensors are row-major `f64` buffers with a shape. Gradient bookkeeping
//! lives here (`requires_grad`, `grad`); the actual differentiation happens
//! on the computation graph in `graph`, which binds parameters in, runs
//! backward, and accumulates results back into these buffers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Gaussian init, every entry ~ Normal(0, std^2).
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.normal(0.0, std)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs parameter length {}",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle into a `ParamStore`. Stable for the lifetime of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter collection. Insertion order is the canonical order for
/// checkpoints and for the optimizer, so runs are reproducible byte-for-byte.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        tensor.requires_grad = true;
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push((name.to_string(), tensor));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Frozen parameters receive no gradients and no optimizer updates.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].1.requires_grad = trainable;
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad.as_deref().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn store_names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.insert("w", Tensor::zeros(&[2])).unwrap();
        let b = s.insert("b", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.name(a), "w");
        assert_eq!(s.name(b), "b");
        assert_eq!(s.id_of("b"), Some(b));
        let names: Vec<_> = s.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn randn_is_seeded() {
        let mut r1 = Rng::stream(7, "init/w");
        let mut r2 = Rng::stream(7, "init/w");
        let a = Tensor::randn(&[4, 4], 0.02, &mut r1);
        let b = Tensor::randn(&[4, 4], 0.02, &mut r2);
        assert_eq!(a.data, b.data);
    }
}
