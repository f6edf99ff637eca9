//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { store: self, vars }
    }

    /// Pairs already-recorded tape variables with this store's names, one
    /// per parameter in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} variables for {} parameters", vars.len(), self.len()),
            ));
        }
        Ok(Bound { store: self, vars })
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
#[derive(Debug)]
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient of every parameter after a backward pass, zeros where none
    /// reached it.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for a `fan_in x fan_out` matrix.
pub fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Random `rows x cols` matrix with orthonormal columns (`cols <= rows`),
/// from the Q factor of a Gaussian matrix by twice-applied modified
/// Gram-Schmidt.
pub fn orthonormal_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<Tensor> {
    if cols > rows {
        return Err(Error::config(format!(
            "cannot fit {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let g = normal(rng, &[rows, cols], 1.0);
    let mut q: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| g.data()[i * cols + j]).collect()).collect();
    for j in 0..cols {
        for _ in 0..2 {
            for p in 0..j {
                let dot: f64 = q[j].iter().zip(&q[p]).map(|(a, b)| a * b).sum();
                let qp = q[p].clone();
                q[j].iter_mut().zip(&qp).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric {
                op: "orthonormal_columns",
                detail: "degenerate random draw".into(),
            });
        }
        q[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * cols + j] = v;
        }
    }
    Tensor::new([rows, cols], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn insert_replaces_by_name() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        s.insert("b", Tensor::zeros([2]));
        s.insert("a", Tensor::scalar(2.0));
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("a").unwrap().item().unwrap(), 2.0);
        assert!(s.get("c").is_err());
    }

    #[test]
    fn orthonormal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, c) in [(4, 4), (6, 3), (14, 14), (1, 1)] {
            let q = orthonormal_columns(&mut rng, r, c).unwrap();
            for a in 0..c {
                for b in 0..c {
                    let dot: f64 = (0..r).map(|i| q.get(&[i, a]) * q.get(&[i, b])).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-13);
                }
            }
        }
        assert!(orthonormal_columns(&mut rng, 2, 3).is_err());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = uniform_fan_in(&mut rng, 16, 8);
        assert_eq!(w.shape(), &[16, 8]);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
    }
}
