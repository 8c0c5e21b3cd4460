use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform with bound `gain / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
        gain: f64,
    },
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

/// Named, shaped parameter tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Each tensor draws from its own stream derived from
    /// `(seed, name)` so adding a parameter never perturbs the others.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let len: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let values: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::Uniform(bound) => (0..len)
                .map(|_| T::lit(rng.random_range(-bound..=bound)))
                .collect(),
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                (0..len)
                    .map(|_| T::lit(rng.random_range(-bound..=bound)))
                    .collect()
            }
            Init::Normal(std) => {
                use rand_distr::{Distribution, StandardNormal};
                (0..len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::lit(z * std)
                    })
                    .collect()
            }
        };
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::lit(x.as_f64())).collect())
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for (name, &id) in &self.index {
            if let Some(oid) = other.id(name) {
                if other.shape(oid) == self.shapes[id.0].as_slice() {
                    self.values[id.0].copy_from_slice(other.value(oid));
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.values
            .iter()
            .map(|v| vec![T::zero(); v.len()])
            .collect()
    }
}

/// Gradient accumulators matching a [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_for(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.zeros_like(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0]
    }

    /// `self += other`, tensor by tensor in a fixed order.
    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
