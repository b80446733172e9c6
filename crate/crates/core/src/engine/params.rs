use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters recorded on a particular tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Builds a binding from explicit `(name, var)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: pairs.into_iter().collect() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, t.with_grad(false));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone().with_grad(trainable))))
            .collect();
        Bound { vars }
    }

    /// Collects the gradient of every bound parameter (zeros where none flowed).
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[k].shape()));
                (k.clone(), g)
            })
            .collect()
    }

    /// Names with `prefix` prepended, e.g. for checkpoint namespaces.
    pub fn prefixed(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (format!("{prefix}{k}"), t.clone())).collect(),
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Every tensor rounded through `f32`.
    pub fn to_f32_precision(&self) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.to_f32_precision())).collect(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        for (k, t) in &reference.tensors {
            match self.tensors.get(k) {
                None => return Err(Error::Config(format!("missing parameter {k}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::dim("parameter layout", p.shape(), t.shape()))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Stream) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Conv kernel `cout x cin x k x k` with fan-in `cin * k * k`.
pub fn conv_kernel(cout: usize, cin: usize, k: usize, rng: &mut Stream) -> Tensor {
    fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::ones(&[1])).unwrap();
        assert!(p.insert("a", Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn layout_check_finds_missing_and_misshapen() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::ones(&[2])).unwrap();
        let mut b = ParamStore::new();
        b.insert("x", Tensor::ones(&[3])).unwrap();
        assert!(b.check_layout(&a).is_err());
        assert!(ParamStore::new().check_layout(&a).is_err());
        assert!(a.check_layout(&a).is_ok());
    }
}
