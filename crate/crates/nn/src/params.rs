//! Named trainable tensors and their gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::NnError;

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Parameters kept sorted by name, which fixes the flat serialization
/// order. Ids are stable once construction is finished.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncatedNormal(f64),
    Constant(f64),
}

pub const DEFAULT_WEIGHT_STD: f64 = 0.05;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; `seed` drives its private init stream.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<(), NnError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::TruncatedNormal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        };
        let pos = self.params.partition_point(|p| p.name.as_str() < name);
        self.params.insert(pos, Param { name: name.to_string(), shape: shape.to_vec(), value });
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.params
            .binary_search_by(|p| p.name.as_str().cmp(name))
            .map(ParamId)
            .map_err(|_| NnError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Names and shapes must agree for values to be interchangeable.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub(crate) fn push_sorted_unchecked(&mut self, p: Param) {
        self.params.push(p);
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; only used to decorrelate per-parameter init streams.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(ps: &ParamSet) -> Self {
        Self { values: ps.iter().map(|p| vec![0.0; p.value.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

/// Draw a seed for a sub-component from a parent generator.
pub fn child_seed(rng: &mut impl Rng) -> u64 {
    rng.gen()
}
