use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±gain·sqrt(3 / fan_in)`, i.e. variance `gain² / fan_in`.
    Uniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

/// Named parameter matrices with deterministic, seeded initialisation.
///
/// Every parameter is a 2-D matrix; biases and vectors are stored as `1 x n`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers a parameter. Panics on a duplicate name: layouts are fixed by code.
    pub fn add(&mut self, name: &str, shape: (usize, usize), init: Init) -> ParamId {
        assert!(
            !self.lookup.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Constant(c) => Array2::from_elem(shape, c),
            Init::Uniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                Array2::from_shape_simple_fn(shape, || self.rng.random_range(-bound..bound))
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Array2::from_shape_simple_fn(shape, || dist.sample(&mut self.rng))
            }
        };
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.lookup.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub(crate) Vec<Array2<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn all_zero(&self, ids: impl IntoIterator<Item = ParamId>) -> bool {
        ids.into_iter()
            .all(|id| self.0[id.0].iter().all(|&v| v == 0.0))
    }
}
