use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Array, Graph, Real, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<E> {
    name: String,
    value: Array<E>,
    frozen: bool,
}

/// Named learnable arrays in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Real = f32> {
    entries: Vec<Entry<E>>,
    index: HashMap<String, usize>,
}

impl<E: Real> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Names are unique; registering twice is a bug in
    /// the model definition.
    pub fn add(&mut self, name: impl Into<String>, value: Array<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Array<E> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<E> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<E>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<E>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.entries[id.0].frozen = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records the parameter on `g`; frozen parameters enter as constants.
    pub fn var(&self, g: &mut Graph<E>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        if e.frozen {
            g.frozen_param(id.0, &e.value)
        } else {
            g.param(id.0, &e.value)
        }
    }

    pub fn cast<F: Real>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds `N(0, std²)` noise to every entry, frozen ones included.
    pub fn jitter(&mut self, rng: &mut impl Rng, std: f64) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += E::of(n * std);
            }
        }
    }
}

/// Parameter initializers; values are drawn in f64 so f32 and f64 models
/// built from one seed agree up to rounding.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
}

impl Init {
    pub fn build<E: Real>(self, shape: &[usize], rng: &mut impl Rng) -> Array<E> {
        match self {
            Init::Zeros => Array::zeros(shape.to_vec()),
            Init::Ones => Array::ones(shape.to_vec()),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| E::of(rng.random_range(-bound..bound)))
                    .collect();
                Array::from_vec(shape.to_vec(), data).expect("length matches shape")
            }
        }
    }
}
