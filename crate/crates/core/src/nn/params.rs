//! Named parameter tensors with per-tensor trainability.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Declaration of one tensor: the name, shape, and initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamDecl {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Parameter collection. Iteration order is lexicographic by name, which is
/// also the order used in weight files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    /// Seed used to initialize the store (0 when loaded without one).
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    /// Initializes every declaration in order from one seeded stream:
    /// normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        for d in decls {
            let tensor = match d.init {
                Init::Normal => Tensor::randn(&d.shape, INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::ones(&d.shape),
            };
            store.insert(&d.name, tensor, true)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(name, "duplicate parameter name"));
        }
        self.entries.insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::config(name, "no such parameter"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// `(total, trainable)` element counts.
    pub fn parameter_count(&self) -> (usize, usize) {
        self.entries.values().fold((0, 0), |(total, train), p| {
            let n = p.tensor.numel();
            (total + n, if p.trainable { train + n } else { train })
        })
    }

    /// Copies tensors whose names start with `prefix` from `source`,
    /// replacing existing entries of the same name. Shapes must agree.
    pub fn load_prefix(&mut self, source: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in self.entries.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = source
                .get(name)
                .ok_or_else(|| Error::config(name.as_str(), "missing from pretrained weights"))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape(format!(
                    "{name}: pretrained shape {:?} vs model shape {:?}",
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Keeps only entries whose names start with `prefix`.
    pub fn retain_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| k.starts_with(prefix));
    }

    /// Bitwise equality of every tensor and flag.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, pa), (b, pb))| a == b && pa.trainable == pb.trainable && pa.tensor.bit_eq(&pb.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_single_weight_and_bias() {
        let decls = [
            ParamDecl::new("w", &[3, 4], Init::Normal),
            ParamDecl::new("b", &[4], Init::Zeros),
        ];
        let ps = ParamStore::init(&decls, 1).unwrap();
        assert_eq!(ps.parameter_count(), (16, 16));
    }

    #[test]
    fn count_is_additive_over_partitions() {
        let decls = [
            ParamDecl::new("a", &[5, 2], Init::Normal),
            ParamDecl::new("b", &[7], Init::Zeros),
            ParamDecl::new("c", &[3, 3], Init::Ones),
        ];
        let mut ps = ParamStore::init(&decls, 3).unwrap();
        ps.set_trainable("b", false).unwrap();
        let (total, trainable) = ps.parameter_count();
        assert_eq!(total, 10 + 7 + 9);
        assert_eq!(trainable, 10 + 9);
    }

    #[test]
    fn duplicate_names_rejected() {
        let decls = [
            ParamDecl::new("w", &[1], Init::Zeros),
            ParamDecl::new("w", &[1], Init::Zeros),
        ];
        assert!(ParamStore::init(&decls, 0).is_err());
    }
}
