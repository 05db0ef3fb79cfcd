use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::nn::tape::{Gradients, Tape, Var};
use crate::nn::tensor::Tensor;

/// A tape bound to a [`ParamStore`]. Parameters are placed on the tape the
/// first time they are requested by name; trainable ones require gradients.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    grad_all: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            grad_all: false,
        }
    }

    /// Like [`Graph::new`], but frozen parameters also receive gradients.
    /// Used by gradient checks.
    pub fn with_all_gradients(store: &'p ParamStore) -> Self {
        Graph {
            grad_all: true,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let trainable = self.grad_all || self.store.is_trainable(name);
        let value = self.store.tensor(name)?.clone();
        let v = self.tape.leaf(value, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients for every bound parameter that required one, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
