//! Named parameter storage shared by models, the optimizer, and checkpoints.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::rng::derived_rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// Ordered name → tensor map. Iteration order is lexicographic, which keeps
/// optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Uniform fan-in init: U(-1/√fan_in, 1/√fan_in), seeded from the run
    /// seed and the parameter name so insertion order is irrelevant.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        let mut rng = derived_rng(seed, "init", &[name_hash(name)]);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data).unwrap());
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![1.0; n]).unwrap());
    }
}

fn name_hash(name: &str) -> u64 {
    crate::rng::derive_seed(0, name, &[])
}

/// Tape-side view of a [`ParamSet`]: every parameter inserted as a var,
/// addressable by name, with gradients collectable after backward.
pub struct ParamVars {
    ids: BTreeMap<String, ValueId>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            ids.insert(name.clone(), tape.var(t.clone()));
        }
        Self { ids }
    }

    /// Bind only a subset as differentiable vars and the rest as constants;
    /// used to freeze components.
    pub fn bind_trainable(
        tape: &mut Tape,
        params: &ParamSet,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let mut ids = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = if trainable(name) {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            };
            ids.insert(name.clone(), id);
        }
        Self { ids }
    }

    /// Bind an externally assembled name → tape-id map.
    pub fn from_map(ids: BTreeMap<String, ValueId>) -> Self {
        Self { ids }
    }

    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients in the same named layout as the source set.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, &id)| (name.clone(), tape.grad(id)))
            .collect()
    }
}
